#include "gradloc/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace gradloc {

const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

// ---- allocation accounting ----

namespace {
std::atomic<std::int64_t> g_live{0};
std::atomic<std::int64_t> g_peak{0};

void bump_peak(std::int64_t live_now) {
    std::int64_t prev = g_peak.load(std::memory_order_relaxed);
    while (live_now > prev &&
           !g_peak.compare_exchange_weak(prev, live_now, std::memory_order_relaxed)) {
    }
}
}  // namespace

namespace memstats {
std::int64_t live_bytes() { return g_live.load(std::memory_order_relaxed); }
std::int64_t peak_bytes() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_live.load(std::memory_order_relaxed), std::memory_order_relaxed); }
}  // namespace memstats

std::pair<std::int64_t, std::int64_t> allocation_stats() {
    return {memstats::live_bytes(), memstats::peak_bytes()};
}

Storage::Storage(std::size_t nbytes) : bytes_(nbytes) {
    const auto live = g_live.fetch_add(static_cast<std::int64_t>(nbytes), std::memory_order_relaxed) +
                      static_cast<std::int64_t>(nbytes);
    bump_peak(live);
}

Storage::~Storage() {
    g_live.fetch_sub(static_cast<std::int64_t>(bytes_.size()), std::memory_order_relaxed);
}

// ---- grad mode ----

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

// ---- Tensor construction / access ----

namespace {
ImplPtr make_impl(Shape shape, DType dtype, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dtype;
    impl->numel = shape_numel(impl->shape);
    impl->value = std::make_shared<Storage>(static_cast<std::size_t>(impl->numel) * dtype_size(dtype));
    impl->requires_grad = requires_grad;
    return impl;
}
}  // namespace

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
    return Tensor(make_impl(std::move(shape), dtype, requires_grad));
}

Tensor Tensor::full(Shape shape, double v, DType dtype) {
    Tensor t(make_impl(std::move(shape), dtype, false));
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        std::fill(d.begin(), d.end(), static_cast<T>(v));
    });
    return t;
}

Tensor Tensor::scalar(double v, DType dtype) { return full({}, v, dtype); }

Tensor Tensor::from_data(const std::vector<float>& v, Shape shape) {
    if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
        throw DimensionError("from_data: element count does not match shape " + shape_str(shape));
    Tensor t(make_impl(std::move(shape), DType::F32, false));
    std::memcpy(t.impl()->value->data(), v.data(), v.size() * sizeof(float));
    return t;
}

Tensor Tensor::from_data(const std::vector<double>& v, Shape shape, DType dtype) {
    if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
        throw DimensionError("from_data: element count does not match shape " + shape_str(shape));
    Tensor t(make_impl(std::move(shape), dtype, false));
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        for (std::size_t i = 0; i < v.size(); ++i) d[i] = static_cast<T>(v[i]);
    });
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a single-element tensor, got " + shape_str(shape()));
    return detail::dispatch(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(data<T>()[0]);
    });
}

std::vector<double> Tensor::to_doubles() const {
    std::vector<double> out(static_cast<std::size_t>(numel()));
    detail::dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto d = data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<double>(d[i]);
    });
    return out;
}

Tensor Tensor::clone() const {
    Tensor t(make_impl(shape(), dtype(), false));
    std::memcpy(t.impl()->value->data(), impl_->value->data(), nbytes());
    return t;
}

Tensor Tensor::grad() const {
    if (!impl_->grad) return Tensor{};
    auto g = std::make_shared<TensorImpl>();
    g->shape = impl_->shape;
    g->dtype = impl_->dtype;
    g->numel = impl_->numel;
    g->value = impl_->grad;
    return Tensor(std::move(g));
}

void Tensor::clear_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
    auto d = std::make_shared<TensorImpl>();
    d->shape = impl_->shape;
    d->dtype = impl_->dtype;
    d->numel = impl_->numel;
    d->value = impl_->value;  // value-identical, shares the buffer
    return Tensor(std::move(d));
}

Tensor detach(const Tensor& x) { return x.detach(); }

void Tensor::backward() const { gradloc::backward(*this); }

// ---- autograd machinery ----

namespace detail {

Tensor grad_view(TensorImpl& impl) {
    if (!impl.grad)
        impl.grad = std::make_shared<Storage>(static_cast<std::size_t>(impl.numel) * dtype_size(impl.dtype));
    auto g = std::make_shared<TensorImpl>();
    g->shape = impl.shape;
    g->dtype = impl.dtype;
    g->numel = impl.numel;
    g->value = impl.grad;
    return Tensor(std::move(g));
}

Tensor make_op_output(Shape shape, DType dtype, std::vector<Tensor> parents, const char* op,
                      std::function<void(const Tensor&)> backward_fn) {
    auto out = make_impl(std::move(shape), dtype, false);
    if (g_grad_enabled) {
        bool any = false;
        for (const auto& p : parents)
            if (p.needs_grad()) any = true;
        if (any) {
            auto node = std::make_shared<Node>();
            node->op = op;
            node->backward = std::move(backward_fn);
            node->inputs.reserve(parents.size());
            for (auto& p : parents)
                if (p.needs_grad()) node->inputs.push_back(p.impl());
            out->node = std::move(node);
        }
    }
    return Tensor(std::move(out));
}

}  // namespace detail

namespace {

// Post-order over impls carrying nodes: inputs precede consumers. Holds
// shared ownership so clearing node inputs during the reverse sweep cannot
// free an impl that is still pending.
std::vector<ImplPtr> topo_order(const ImplPtr& root) {
    std::vector<ImplPtr> order;
    if (!root->node) return order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<ImplPtr, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [impl, next] = stack.back();
        const auto& inputs = impl->node->inputs;
        bool descended = false;
        while (next < inputs.size()) {
            const ImplPtr& child = inputs[next];
            ++next;
            if (child->node && !visited.count(child.get())) {
                visited.insert(child.get());
                stack.emplace_back(child, 0);
                descended = true;
                break;
            }
        }
        if (!descended) {
            order.push_back(std::move(stack.back().first));
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace

void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    auto root = loss.impl();
    if (!root->needs_grad()) throw ContractError("backward on a tensor with no tape attachment");

    // Seed d(loss)/d(loss) = 1, accumulating on top of prior calls.
    detail::dispatch(root->dtype, [&](auto tag) {
        using T = decltype(tag);
        auto g = detail::grad_view(*root);
        g.data<T>()[0] += T(1);
    });
    if (!root->node) return;  // loss is itself a leaf

    auto order = topo_order(root);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* impl = it->get();
        auto& node = impl->node;
        if (!node->backward)
            throw ContractError(std::string("backward through an already consumed graph at op ") + node->op);
        if (impl->grad) {
            Tensor gout = detail::grad_view(*impl);
            node->backward(gout);
        }
        node->backward = nullptr;
        node->inputs.clear();
        impl->grad.reset();  // non-leaf gradients are transient
    }
}

std::vector<ImplPtr> reachable_leaves(const Tensor& loss) {
    std::vector<ImplPtr> leaves;
    std::unordered_set<TensorImpl*> visited;
    std::vector<ImplPtr> stack{loss.impl()};
    while (!stack.empty()) {
        ImplPtr cur = stack.back();
        stack.pop_back();
        if (visited.count(cur.get())) continue;
        visited.insert(cur.get());
        if (cur->requires_grad && !cur->node) leaves.push_back(cur);
        if (cur->node)
            for (const auto& in : cur->node->inputs) stack.push_back(in);
    }
    return leaves;
}

// ---- kernels ----

namespace {

using detail::dispatch;
using detail::grad_view;
using detail::make_op_output;

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Shape strides_of(const Shape& shape) {
    Shape st(shape.size(), 1);
    for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * shape[i + 1];
    return st;
}

// Right-aligned broadcast strides of b against shape `out`; throws if b does
// not broadcast. Dimension of size 1 gets stride 0.
Shape broadcast_strides(const Shape& out, const Shape& bshape) {
    if (bshape.size() > out.size())
        throw DimensionError("operand of shape " + shape_str(bshape) + " does not broadcast into " + shape_str(out));
    Shape bst = strides_of(bshape);
    Shape st(out.size(), 0);
    const std::size_t off = out.size() - bshape.size();
    for (std::size_t i = 0; i < bshape.size(); ++i) {
        if (bshape[i] == out[off + i])
            st[off + i] = bst[i];
        else if (bshape[i] == 1)
            st[off + i] = 0;
        else
            throw DimensionError("operand of shape " + shape_str(bshape) + " does not broadcast into " +
                                 shape_str(out));
    }
    return st;
}

// Odometer walk over `shape` calling fn(flat_index, offset_under_strides).
template <class F>
void for_each_broadcast(const Shape& shape, const Shape& bstrides, F&& fn) {
    const std::int64_t n = shape_numel(shape);
    const int nd = static_cast<int>(shape.size());
    Shape idx(shape.size(), 0);
    std::int64_t boff = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        fn(flat, boff);
        for (int d = nd - 1; d >= 0; --d) {
            ++idx[d];
            boff += bstrides[d];
            if (idx[d] < shape[d]) break;
            boff -= bstrides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

template <typename T>
T sigmoid_val(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

// ---- elementwise ----

Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind) {
    if (a.dtype() != b.dtype()) throw ContractError("elementwise: dtype mismatch");
    const Shape bst = broadcast_strides(a.shape(), b.shape());
    const bool same = a.shape() == b.shape();
    const char* name = kind == EwKind::Add   ? "add"
                       : kind == EwKind::Sub ? "sub"
                       : kind == EwKind::Mul ? "mul"
                                             : "div";

    Tensor out = make_op_output(a.shape(), a.dtype(), {a, b}, name, [a, b, bst, kind](const Tensor& gout) {
        dispatch(a.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto gy = gout.data<T>();
            const auto av = a.data<T>();
            const auto bv = b.data<T>();
            if (a.needs_grad()) {
                auto ga = grad_view(*a.impl()).template data<T>();
                switch (kind) {
                    case EwKind::Add:
                    case EwKind::Sub:
                        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
                        break;
                    case EwKind::Mul:
                        for_each_broadcast(a.shape(), bst,
                                           [&](std::int64_t i, std::int64_t bo) { ga[i] += gy[i] * bv[bo]; });
                        break;
                    case EwKind::Div:
                        for_each_broadcast(a.shape(), bst,
                                           [&](std::int64_t i, std::int64_t bo) { ga[i] += gy[i] / bv[bo]; });
                        break;
                }
            }
            if (b.needs_grad()) {
                auto gb = grad_view(*b.impl()).template data<T>();
                switch (kind) {
                    case EwKind::Add:
                        for_each_broadcast(a.shape(), bst, [&](std::int64_t i, std::int64_t bo) { gb[bo] += gy[i]; });
                        break;
                    case EwKind::Sub:
                        for_each_broadcast(a.shape(), bst, [&](std::int64_t i, std::int64_t bo) { gb[bo] -= gy[i]; });
                        break;
                    case EwKind::Mul:
                        for_each_broadcast(a.shape(), bst,
                                           [&](std::int64_t i, std::int64_t bo) { gb[bo] += gy[i] * av[i]; });
                        break;
                    case EwKind::Div:
                        for_each_broadcast(a.shape(), bst, [&](std::int64_t i, std::int64_t bo) {
                            gb[bo] -= gy[i] * av[i] / (bv[bo] * bv[bo]);
                        });
                        break;
                }
            }
        });
    });

    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto av = a.data<T>();
        const auto bv = b.data<T>();
        auto ov = out.data<T>();
        if (same) {
            switch (kind) {
                case EwKind::Add:
                    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
                    break;
                case EwKind::Sub:
                    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
                    break;
                case EwKind::Mul:
                    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
                    break;
                case EwKind::Div:
                    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
                    break;
            }
        } else {
            switch (kind) {
                case EwKind::Add:
                    for_each_broadcast(a.shape(), bst,
                                       [&](std::int64_t i, std::int64_t bo) { ov[i] = av[i] + bv[bo]; });
                    break;
                case EwKind::Sub:
                    for_each_broadcast(a.shape(), bst,
                                       [&](std::int64_t i, std::int64_t bo) { ov[i] = av[i] - bv[bo]; });
                    break;
                case EwKind::Mul:
                    for_each_broadcast(a.shape(), bst,
                                       [&](std::int64_t i, std::int64_t bo) { ov[i] = av[i] * bv[bo]; });
                    break;
                case EwKind::Div:
                    for_each_broadcast(a.shape(), bst,
                                       [&](std::int64_t i, std::int64_t bo) { ov[i] = av[i] / bv[bo]; });
                    break;
            }
        }
    });
    return out;
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
    if (a.dtype() != b.dtype()) throw ContractError("matmul: dtype mismatch");
    if (a.ndim() < 2 || b.ndim() < 2)
        throw DimensionError("matmul requires >=2-D operands, got " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const auto& as = a.shape();
    const auto& bs = b.shape();
    const std::int64_t m = as[as.size() - 2];
    const std::int64_t k = as[as.size() - 1];
    const std::int64_t bk = transpose_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
    const std::int64_t n = transpose_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
    if (k != bk)
        throw DimensionError("matmul: inner dimensions disagree, " + shape_str(as) + " x " + shape_str(bs));
    const bool b_shared = b.ndim() == 2 && a.ndim() > 2;
    if (!b_shared && a.ndim() != b.ndim())
        throw DimensionError("matmul: rank mismatch, " + shape_str(as) + " x " + shape_str(bs));
    Shape out_shape(as.begin(), as.end() - 2);
    if (!b_shared) {
        for (std::size_t i = 0; i + 2 < bs.size(); ++i)
            if (bs[i] != as[i])
                throw DimensionError("matmul: batch dimensions disagree, " + shape_str(as) + " x " + shape_str(bs));
    }
    out_shape.push_back(m);
    out_shape.push_back(n);
    const std::int64_t batch = shape_numel(as) / (m * k);

    Tensor out = make_op_output(
        std::move(out_shape), a.dtype(), {a, b}, "matmul",
        [a, b, m, n, k, batch, b_shared, transpose_b](const Tensor& gout) {
            dispatch(a.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* av = a.data<T>().data();
                const T* bv = b.data<T>().data();
                const T* gy = gout.data<T>().data();
                const std::int64_t bstep = b_shared ? 0 : (transpose_b ? n * k : k * n);
                if (a.needs_grad()) {
                    T* ga = grad_view(*a.impl()).template data<T>().data();
                    for (std::int64_t i = 0; i < batch; ++i) {
                        MatMap<T> gA(ga + i * m * k, m, k);
                        ConstMatMap<T> gC(gy + i * m * n, m, n);
                        if (transpose_b) {
                            ConstMatMap<T> B(bv + i * bstep, n, k);
                            gA.noalias() += gC * B;
                        } else {
                            ConstMatMap<T> B(bv + i * bstep, k, n);
                            gA.noalias() += gC * B.transpose();
                        }
                    }
                }
                if (b.needs_grad()) {
                    T* gb = grad_view(*b.impl()).template data<T>().data();
                    for (std::int64_t i = 0; i < batch; ++i) {
                        ConstMatMap<T> A(av + i * m * k, m, k);
                        ConstMatMap<T> gC(gy + i * m * n, m, n);
                        if (transpose_b) {
                            MatMap<T> gB(gb + (b_shared ? 0 : i * bstep), n, k);
                            gB.noalias() += gC.transpose() * A;
                        } else {
                            MatMap<T> gB(gb + (b_shared ? 0 : i * bstep), k, n);
                            gB.noalias() += A.transpose() * gC;
                        }
                    }
                }
            });
        });

    dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* av = a.data<T>().data();
        const T* bv = b.data<T>().data();
        T* ov = out.data<T>().data();
        const std::int64_t bstep = b_shared ? 0 : (transpose_b ? n * k : k * n);
        for (std::int64_t i = 0; i < batch; ++i) {
            ConstMatMap<T> A(av + i * m * k, m, k);
            MatMap<T> C(ov + i * m * n, m, n);
            if (transpose_b) {
                ConstMatMap<T> B(bv + i * bstep, n, k);
                C.noalias() = A * B.transpose();
            } else {
                ConstMatMap<T> B(bv + i * bstep, k, n);
                C.noalias() = A * B;
            }
        }
    });
    return out;
}

// ---- scalar / unary ----

namespace {

template <class FwdFn>
Tensor unary_op(const Tensor& x, const char* name, FwdFn fwd, std::function<void(const Tensor&)> backward_fn) {
    Tensor out = make_op_output(x.shape(), x.dtype(), {x}, name, std::move(backward_fn));
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = static_cast<T>(fwd(static_cast<double>(xv[i])));
    });
    return out;
}

// Backward that only needs the saved input x and d(out)/d(x) as a function of x.
template <class DervFn>
std::function<void(const Tensor&)> x_backward(const Tensor& x, DervFn df) {
    return [x, df](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const auto gy = gout.data<T>();
            const auto xv = x.data<T>();
            auto gx = grad_view(*x.impl()).template data<T>();
            for (std::size_t i = 0; i < gy.size(); ++i)
                gx[i] += gy[i] * static_cast<T>(df(static_cast<double>(xv[i])));
        });
    };
}

}  // namespace

Tensor affine(const Tensor& x, double scale, double shift) {
    return unary_op(
        x, "affine", [=](double v) { return scale * v + shift; },
        x_backward(x, [=](double) { return scale; }));
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, "exp", [](double v) { return std::exp(v); },
        x_backward(x, [](double v) { return std::exp(v); }));
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, "log", [](double v) { return std::log(v); },
        x_backward(x, [](double v) { return 1.0 / v; }));
}

Tensor sqrt(const Tensor& x) {
    return unary_op(
        x, "sqrt", [](double v) { return std::sqrt(v); },
        x_backward(x, [](double v) { return 0.5 / std::sqrt(v); }));
}

Tensor clamp(const Tensor& x, double lo, double hi) {
    return unary_op(
        x, "clamp", [=](double v) { return std::min(std::max(v, lo), hi); },
        x_backward(x, [=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; }));
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        x, "gelu",
        [](double v) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            return 0.5 * v * (1.0 + std::tanh(u));
        },
        x_backward(x, [](double v) {
            const double u = kGeluC * (v + kGeluA * v * v * v);
            const double t = std::tanh(u);
            const double sech2 = 1.0 - t * t;
            return 0.5 * (1.0 + t) + 0.5 * v * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        }));
}

Tensor sigmoid(const Tensor& x) {
    Tensor out = make_op_output(x.shape(), x.dtype(), {x}, "sigmoid", [](const Tensor&) {});
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const auto xv = x.data<T>();
        auto ov = out.data<T>();
        for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = sigmoid_val(xv[i]);
    });
    if (out.has_node()) {
        Tensor saved = out.detach();
        out.impl()->node->backward = [x, saved](const Tensor& gout) {
            dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const auto gy = gout.data<T>();
                const auto yv = saved.data<T>();
                auto gx = grad_view(*x.impl()).template data<T>();
                for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
            });
        };
    }
    return out;
}

Tensor activation(const Tensor& x, ActKind kind) {
    return kind == ActKind::Gelu ? gelu(x) : sigmoid(x);
}

// ---- softmax ----

Tensor softmax(const Tensor& x, int axis) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw DimensionError("softmax: axis out of range for " + shape_str(x.shape()));
    const std::int64_t n = x.shape()[axis];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];

    Tensor out = make_op_output(x.shape(), x.dtype(), {x}, "softmax", [](const Tensor&) {});
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const T* xr = xv + o * n * inner + in;
                T* orow = ov + o * n * inner + in;
                T mx = xr[0];
                for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i * inner]);
                if (!std::isfinite(static_cast<double>(mx))) throw NumericError("softmax: non-finite input");
                T s = 0;
                for (std::int64_t i = 0; i < n; ++i) {
                    const T e = std::exp(xr[i * inner] - mx);
                    orow[i * inner] = e;
                    s += e;
                }
                for (std::int64_t i = 0; i < n; ++i) orow[i * inner] /= s;
            }
        }
    });
    if (out.has_node()) {
        Tensor saved = out.detach();
        out.impl()->node->backward = [x, saved, n, outer, inner](const Tensor& gout) {
            dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const T* gy = gout.data<T>().data();
                const T* yv = saved.data<T>().data();
                T* gx = grad_view(*x.impl()).template data<T>().data();
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t in = 0; in < inner; ++in) {
                        const std::int64_t base = o * n * inner + in;
                        T dot = 0;
                        for (std::int64_t i = 0; i < n; ++i) dot += gy[base + i * inner] * yv[base + i * inner];
                        for (std::int64_t i = 0; i < n; ++i) {
                            const std::int64_t ix = base + i * inner;
                            gx[ix] += yv[ix] * (gy[ix] - dot);
                        }
                    }
                }
            });
        };
    }
    return out;
}

// ---- layer_norm ----

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const std::int64_t c = x.shape().empty() ? 1 : x.shape().back();
    if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != c || beta.dim(0) != c)
        throw DimensionError("layer_norm: gamma/beta must be 1-D of size " + std::to_string(c));
    if (eps <= 0) throw ParameterError("layer_norm: eps must be positive");
    const std::int64_t rows = x.numel() / c;

    Tensor out = make_op_output(x.shape(), x.dtype(), {x, gamma, beta}, "layer_norm",
                                [x, gamma, beta, eps, rows, c](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* xv = x.data<T>().data();
            const T* gv = gamma.data<T>().data();
            const T* gy = gout.data<T>().data();
            T* gx = x.needs_grad() ? grad_view(*x.impl()).template data<T>().data() : nullptr;
            T* gg = gamma.needs_grad() ? grad_view(*gamma.impl()).template data<T>().data() : nullptr;
            T* gb = beta.needs_grad() ? grad_view(*beta.impl()).template data<T>().data() : nullptr;
            std::vector<T> xhat(static_cast<std::size_t>(c));
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* xr = xv + r * c;
                const T* gyr = gy + r * c;
                T mu = 0;
                for (std::int64_t i = 0; i < c; ++i) mu += xr[i];
                mu /= static_cast<T>(c);
                T var = 0;
                for (std::int64_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
                var /= static_cast<T>(c);
                const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
                for (std::int64_t i = 0; i < c; ++i) xhat[static_cast<std::size_t>(i)] = (xr[i] - mu) * inv;
                if (gg || gb) {
                    for (std::int64_t i = 0; i < c; ++i) {
                        if (gg) gg[i] += gyr[i] * xhat[static_cast<std::size_t>(i)];
                        if (gb) gb[i] += gyr[i];
                    }
                }
                if (gx) {
                    T m1 = 0, m2 = 0;
                    for (std::int64_t i = 0; i < c; ++i) {
                        const T dxh = gyr[i] * gv[i];
                        m1 += dxh;
                        m2 += dxh * xhat[static_cast<std::size_t>(i)];
                    }
                    m1 /= static_cast<T>(c);
                    m2 /= static_cast<T>(c);
                    for (std::int64_t i = 0; i < c; ++i) {
                        const T dxh = gyr[i] * gv[i];
                        gx[r * c + i] += inv * (dxh - m1 - xhat[static_cast<std::size_t>(i)] * m2);
                    }
                }
            }
        });
    });

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        const T* gv = gamma.data<T>().data();
        const T* bv = beta.data<T>().data();
        T* ov = out.data<T>().data();
        for (std::int64_t r = 0; r < rows; ++r) {
            const T* xr = xv + r * c;
            T* orow = ov + r * c;
            T mu = 0;
            for (std::int64_t i = 0; i < c; ++i) mu += xr[i];
            mu /= static_cast<T>(c);
            T var = 0;
            for (std::int64_t i = 0; i < c; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= static_cast<T>(c);
            const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
            for (std::int64_t i = 0; i < c; ++i) orow[i] = gv[i] * ((xr[i] - mu) * inv) + bv[i];
        }
    });
    return out;
}

// ---- convolution ----

namespace {

struct ConvDims {
    std::int64_t b, cin, h, w, cout, kh, kw, ho, wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv2d expects 4-D input and weight, got " + shape_str(x.shape()) + " and " +
                             shape_str(w.shape()));
    ConvDims d{};
    d.b = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    if (w.dim(1) != d.cin)
        throw DimensionError("conv2d: weight Cin " + std::to_string(w.dim(1)) + " != input Cin " +
                             std::to_string(d.cin));
    if (d.kh > d.h + 2 * pad || d.kw > d.w + 2 * pad)
        throw DimensionError("conv2d: kernel larger than padded input");
    d.ho = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wo = (d.w + 2 * pad - d.kw) / stride + 1;
    return d;
}

template <typename T>
void im2col(const T* x, const ConvDims& d, int stride, int pad, std::int64_t batch, T* col) {
    // col: [ho*wo, cin*kh*kw]
    const T* xb = x + batch * d.cin * d.h * d.w;
    std::int64_t row = 0;
    for (std::int64_t oy = 0; oy < d.ho; ++oy) {
        for (std::int64_t ox = 0; ox < d.wo; ++ox, ++row) {
            T* crow = col + row * d.cin * d.kh * d.kw;
            std::int64_t q = 0;
            for (std::int64_t ci = 0; ci < d.cin; ++ci) {
                for (std::int64_t dy = 0; dy < d.kh; ++dy) {
                    const std::int64_t iy = oy * stride + dy - pad;
                    for (std::int64_t dx = 0; dx < d.kw; ++dx, ++q) {
                        const std::int64_t ix = ox * stride + dx - pad;
                        crow[q] = (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w)
                                      ? xb[(ci * d.h + iy) * d.w + ix]
                                      : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvDims& d, int stride, int pad, std::int64_t batch, T* gx) {
    T* xb = gx + batch * d.cin * d.h * d.w;
    std::int64_t row = 0;
    for (std::int64_t oy = 0; oy < d.ho; ++oy) {
        for (std::int64_t ox = 0; ox < d.wo; ++ox, ++row) {
            const T* crow = col + row * d.cin * d.kh * d.kw;
            std::int64_t q = 0;
            for (std::int64_t ci = 0; ci < d.cin; ++ci) {
                for (std::int64_t dy = 0; dy < d.kh; ++dy) {
                    const std::int64_t iy = oy * stride + dy - pad;
                    for (std::int64_t dx = 0; dx < d.kw; ++dx, ++q) {
                        const std::int64_t ix = ox * stride + dx - pad;
                        if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) xb[(ci * d.h + iy) * d.w + ix] += crow[q];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (stride <= 0) throw ParameterError("conv2d: stride must be positive");
    if (pad < 0) throw ParameterError("conv2d: pad must be non-negative");
    if (x.dtype() != w.dtype()) throw ContractError("conv2d: dtype mismatch");
    const ConvDims d = conv_dims(x, w, stride, pad);

    Tensor out = make_op_output({d.b, d.cout, d.ho, d.wo}, x.dtype(), {x, w}, "conv2d",
                                [x, w, stride, pad, d](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const std::int64_t kdim = d.cin * d.kh * d.kw;
            Tensor col = Tensor::zeros({d.ho * d.wo, kdim}, x.dtype());
            T* colp = col.data<T>().data();
            const T* xv = x.data<T>().data();
            const T* wv = w.data<T>().data();
            const T* gy = gout.data<T>().data();
            T* gw = w.needs_grad() ? grad_view(*w.impl()).template data<T>().data() : nullptr;
            T* gx = x.needs_grad() ? grad_view(*x.impl()).template data<T>().data() : nullptr;
            Tensor dcol = Tensor::zeros({d.ho * d.wo, kdim}, x.dtype());
            T* dcolp = dcol.data<T>().data();
            ConstMatMap<T> Wm(wv, d.cout, kdim);
            for (std::int64_t bi = 0; bi < d.b; ++bi) {
                ConstMatMap<T> gY(gy + bi * d.cout * d.ho * d.wo, d.cout, d.ho * d.wo);
                if (gw) {
                    im2col(xv, d, stride, pad, bi, colp);
                    ConstMatMap<T> Col(colp, d.ho * d.wo, kdim);
                    MatMap<T> gW(gw, d.cout, kdim);
                    gW.noalias() += gY * Col;
                }
                if (gx) {
                    MatMap<T> dCol(dcolp, d.ho * d.wo, kdim);
                    dCol.noalias() = gY.transpose() * Wm;
                    col2im_add(dcolp, d, stride, pad, bi, gx);
                }
            }
        });
    });

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const std::int64_t kdim = d.cin * d.kh * d.kw;
        Tensor col = Tensor::zeros({d.ho * d.wo, kdim}, x.dtype());
        T* colp = col.data<T>().data();
        const T* xv = x.data<T>().data();
        const T* wv = w.data<T>().data();
        T* ov = out.data<T>().data();
        ConstMatMap<T> Wm(wv, d.cout, kdim);
        for (std::int64_t bi = 0; bi < d.b; ++bi) {
            im2col(xv, d, stride, pad, bi, colp);
            ConstMatMap<T> Col(colp, d.ho * d.wo, kdim);
            MatMap<T> O(ov + bi * d.cout * d.ho * d.wo, d.cout, d.ho * d.wo);
            O.noalias() = Wm * Col.transpose();
        }
    });
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride) {
    if (stride <= 0) throw ParameterError("conv_transpose2d: stride must be positive");
    if (x.dtype() != w.dtype()) throw ContractError("conv_transpose2d: dtype mismatch");
    if (x.ndim() != 4 || w.ndim() != 4)
        throw DimensionError("conv_transpose2d expects 4-D input and weight, got " + shape_str(x.shape()) +
                             " and " + shape_str(w.shape()));
    const std::int64_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(0) != cin)
        throw DimensionError("conv_transpose2d: weight Cin " + std::to_string(w.dim(0)) + " != input Cin " +
                             std::to_string(cin));
    const std::int64_t ho = (h - 1) * stride + kh;
    const std::int64_t wo = (wd - 1) * stride + kw;

    Tensor out = make_op_output({b, cout, ho, wo}, x.dtype(), {x, w}, "conv_transpose2d",
                                [x, w, stride, b, cin, h, wd, cout, kh, kw, ho, wo](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* xv = x.data<T>().data();
            const T* wv = w.data<T>().data();
            const T* gy = gout.data<T>().data();
            T* gx = x.needs_grad() ? grad_view(*x.impl()).template data<T>().data() : nullptr;
            T* gw = w.needs_grad() ? grad_view(*w.impl()).template data<T>().data() : nullptr;
            for (std::int64_t bi = 0; bi < b; ++bi) {
                for (std::int64_t ci = 0; ci < cin; ++ci) {
                    for (std::int64_t i = 0; i < h; ++i) {
                        for (std::int64_t j = 0; j < wd; ++j) {
                            const std::int64_t xoff = ((bi * cin + ci) * h + i) * wd + j;
                            T acc = 0;
                            for (std::int64_t co = 0; co < cout; ++co) {
                                const T* wrow = wv + ((ci * cout + co) * kh) * kw;
                                const T* gyp = gy + ((bi * cout + co) * ho + i * stride) * wo + j * stride;
                                for (std::int64_t dy = 0; dy < kh; ++dy) {
                                    for (std::int64_t dx = 0; dx < kw; ++dx) {
                                        const T g = gyp[dy * wo + dx];
                                        if (gx) acc += g * wrow[dy * kw + dx];
                                        if (gw) gw[((ci * cout + co) * kh + dy) * kw + dx] += xv[xoff] * g;
                                    }
                                }
                            }
                            if (gx) gx[xoff] += acc;
                        }
                    }
                }
            }
        });
    });

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        const T* wv = w.data<T>().data();
        T* ov = out.data<T>().data();
        std::memset(ov, 0, out.nbytes());
        for (std::int64_t bi = 0; bi < b; ++bi) {
            for (std::int64_t ci = 0; ci < cin; ++ci) {
                for (std::int64_t i = 0; i < h; ++i) {
                    for (std::int64_t j = 0; j < wd; ++j) {
                        const T v = xv[((bi * cin + ci) * h + i) * wd + j];
                        for (std::int64_t co = 0; co < cout; ++co) {
                            const T* wrow = wv + ((ci * cout + co) * kh) * kw;
                            T* op = ov + ((bi * cout + co) * ho + i * stride) * wo + j * stride;
                            for (std::int64_t dy = 0; dy < kh; ++dy)
                                for (std::int64_t dx = 0; dx < kw; ++dx)
                                    op[dy * wo + dx] += v * wrow[dy * kw + dx];
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---- reductions ----

namespace {

Tensor reduce_impl(const Tensor& x, std::vector<int> axes, bool keepdim, bool take_mean, const char* name) {
    const int nd = x.ndim();
    std::vector<bool> reduced(static_cast<std::size_t>(nd), false);
    for (int a : axes) {
        if (a < 0) a += nd;
        if (a < 0 || a >= nd) throw DimensionError("reduce: axis out of range for " + shape_str(x.shape()));
        reduced[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape;
    std::int64_t count = 1;
    for (int i = 0; i < nd; ++i) {
        if (reduced[static_cast<std::size_t>(i)]) {
            count *= x.shape()[i];
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[i]);
        }
    }
    // Strides of the output aligned with input dims (0 on reduced dims).
    Shape ost(static_cast<std::size_t>(nd), 0);
    {
        Shape full(static_cast<std::size_t>(nd), 1);
        for (int i = 0; i < nd; ++i) full[static_cast<std::size_t>(i)] = reduced[static_cast<std::size_t>(i)] ? 1 : x.shape()[i];
        Shape fst = strides_of(full);
        for (int i = 0; i < nd; ++i)
            if (!reduced[static_cast<std::size_t>(i)]) ost[static_cast<std::size_t>(i)] = fst[static_cast<std::size_t>(i)];
    }
    const double scale = take_mean ? 1.0 / static_cast<double>(count) : 1.0;

    Tensor out = make_op_output(out_shape, x.dtype(), {x}, name, [x, ost, scale](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* gy = gout.data<T>().data();
            T* gx = grad_view(*x.impl()).template data<T>().data();
            const T s = static_cast<T>(scale);
            for_each_broadcast(x.shape(), ost, [&](std::int64_t i, std::int64_t oo) { gx[i] += gy[oo] * s; });
        });
    });

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        auto ov = out.data<T>();
        std::fill(ov.begin(), ov.end(), T(0));
        for_each_broadcast(x.shape(), ost, [&](std::int64_t i, std::int64_t oo) { ov[oo] += xv[i]; });
        if (take_mean) {
            const T s = static_cast<T>(scale);
            for (auto& v : ov) v *= s;
        }
    });
    return out;
}

}  // namespace

Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdim) {
    return reduce_impl(x, std::move(axes), keepdim, false, "sum_axes");
}

Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdim) {
    return reduce_impl(x, std::move(axes), keepdim, true, "mean_axes");
}

Tensor sum(const Tensor& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.ndim()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_impl(x, std::move(axes), false, false, "sum");
}

Tensor mean(const Tensor& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.ndim()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_impl(x, std::move(axes), false, true, "mean");
}

Tensor max_axis_detached(const Tensor& x, int axis, bool keepdim) {
    const int nd = x.ndim();
    if (axis < 0) axis += nd;
    if (axis < 0 || axis >= nd) throw DimensionError("max: axis out of range for " + shape_str(x.shape()));
    const std::int64_t n = x.shape()[axis];
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
    for (int i = axis + 1; i < nd; ++i) inner *= x.shape()[i];
    Shape out_shape;
    for (int i = 0; i < nd; ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(x.shape()[i]);
        }
    }
    Tensor out = Tensor::zeros(out_shape, x.dtype());
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const T* xr = xv + o * n * inner + in;
                T mx = xr[0];
                for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, xr[i * inner]);
                ov[o * inner + in] = mx;
            }
        }
    });
    return out;
}

// ---- shape / indexing ----

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = x.dtype();
    impl->numel = x.numel();
    impl->value = x.impl()->value;  // same buffer
    if (g_grad_enabled && x.needs_grad()) {
        auto node = std::make_shared<Node>();
        node->op = "reshape";
        node->inputs.push_back(x.impl());
        node->backward = [x](const Tensor& gout) {
            dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                const auto gy = gout.data<T>();
                auto gx = grad_view(*x.impl()).template data<T>();
                for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
            });
        };
        impl->node = std::move(node);
    }
    return Tensor(std::move(impl));
}

namespace {

// Generic gather y[i] = x[map(i)] where map is a statically-known lambda.
// Backward scatter-adds through the same mapping.
template <class MapFn>
Tensor indexed_gather(const Tensor& x, Shape out_shape, const char* name, MapFn map) {
    const std::int64_t n = shape_numel(out_shape);
    Tensor out = make_op_output(std::move(out_shape), x.dtype(), {x}, name, [x, map, n](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* gy = gout.data<T>().data();
            T* gx = grad_view(*x.impl()).template data<T>().data();
            for (std::int64_t i = 0; i < n; ++i) gx[map(i)] += gy[i];
        });
    });
    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (std::int64_t i = 0; i < n; ++i) ov[i] = xv[map(i)];
    });
    return out;
}

}  // namespace

Tensor gather_flat(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> map, Shape out_shape) {
    if (static_cast<std::int64_t>(map->size()) != shape_numel(out_shape))
        throw DimensionError("gather_flat: map size does not match output shape " + shape_str(out_shape));
    const std::int64_t lim = x.numel();
    for (auto ix : *map)
        if (ix < 0 || ix >= lim) throw DimensionError("gather_flat: index out of range");
    const std::int64_t* mp = map->data();
    return indexed_gather(x, std::move(out_shape), "gather_flat",
                          [map, mp](std::int64_t i) { return mp[i]; });
}

Tensor narrow0(const Tensor& x, std::int64_t start, std::int64_t len) {
    if (x.ndim() < 1) throw DimensionError("narrow0 requires >=1-D input");
    if (start < 0 || len < 0 || start + len > x.dim(0))
        throw DimensionError("narrow0: range out of bounds for " + shape_str(x.shape()));
    const std::int64_t stride0 = x.numel() / x.dim(0);
    Shape out_shape = x.shape();
    out_shape[0] = len;
    const std::int64_t off = start * stride0;
    return indexed_gather(x, std::move(out_shape), "narrow0", [off](std::int64_t i) { return off + i; });
}

Tensor permute(const Tensor& x, std::vector<int> axes) {
    const int nd = x.ndim();
    if (static_cast<int>(axes.size()) != nd) throw DimensionError("permute: axes rank mismatch");
    std::vector<bool> seen(static_cast<std::size_t>(nd), false);
    Shape out_shape(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i) {
        const int a = axes[static_cast<std::size_t>(i)];
        if (a < 0 || a >= nd || seen[static_cast<std::size_t>(a)]) throw DimensionError("permute: invalid axes");
        seen[static_cast<std::size_t>(a)] = true;
        out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(a)];
    }
    const Shape xst = strides_of(x.shape());
    // Stride in the input for each output dim.
    Shape map_strides(static_cast<std::size_t>(nd));
    for (int i = 0; i < nd; ++i)
        map_strides[static_cast<std::size_t>(i)] = xst[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
    const Shape ost = strides_of(out_shape);
    const int ndc = nd;
    auto map = [map_strides, ost, ndc](std::int64_t i) {
        std::int64_t off = 0;
        for (int d = 0; d < ndc; ++d) {
            const std::int64_t q = i / ost[static_cast<std::size_t>(d)];
            i -= q * ost[static_cast<std::size_t>(d)];
            off += q * map_strides[static_cast<std::size_t>(d)];
        }
        return off;
    };
    return indexed_gather(x, std::move(out_shape), "permute", map);
}

Tensor roll2d(const Tensor& x, std::int64_t dr, std::int64_t dc) {
    if (x.ndim() != 4) throw DimensionError("roll2d expects [B,h,w,C], got " + shape_str(x.shape()));
    const std::int64_t h = x.dim(1), w = x.dim(2), c = x.dim(3);
    const std::int64_t sr = ((dr % h) + h) % h;
    const std::int64_t sc = ((dc % w) + w) % w;
    auto map = [h, w, c, sr, sc](std::int64_t i) {
        const std::int64_t ch = i % c;
        std::int64_t t = i / c;
        const std::int64_t cc = t % w;
        t /= w;
        const std::int64_t rr = t % h;
        const std::int64_t b = t / h;
        const std::int64_t srcr = (rr + sr) % h;
        const std::int64_t srcc = (cc + sc) % w;
        return ((b * h + srcr) * w + srcc) * c + ch;
    };
    return indexed_gather(x, x.shape(), "roll2d", map);
}

Tensor window_partition(const Tensor& x, std::int64_t win) {
    if (x.ndim() != 4) throw DimensionError("window_partition expects [B,h,w,C], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (win <= 0 || h % win != 0 || w % win != 0)
        throw DimensionError("window_partition: grid " + shape_str(x.shape()) + " not divisible by window " +
                             std::to_string(win));
    const std::int64_t nwr = h / win, nwc = w / win;
    auto map = [h, w, c, win, nwc](std::int64_t i) {
        const std::int64_t ch = i % c;
        std::int64_t t = i / c;
        const std::int64_t slot = t % (win * win);
        const std::int64_t nw = t / (win * win);
        const std::int64_t wc = nw % nwc;
        std::int64_t t2 = nw / nwc;
        const std::int64_t wr = t2 % (h / win);
        const std::int64_t bi = t2 / (h / win);
        const std::int64_t r = wr * win + slot / win;
        const std::int64_t cc = wc * win + slot % win;
        return ((bi * h + r) * w + cc) * c + ch;
    };
    return indexed_gather(x, {b * nwr * nwc, win * win, c}, "window_partition", map);
}

Tensor window_reverse(const Tensor& x, std::int64_t win, std::int64_t h, std::int64_t w) {
    if (x.ndim() != 3) throw DimensionError("window_reverse expects [nW,T,C], got " + shape_str(x.shape()));
    const std::int64_t c = x.dim(2);
    if (win <= 0 || h % win != 0 || w % win != 0 || x.dim(1) != win * win)
        throw DimensionError("window_reverse: inconsistent window geometry");
    const std::int64_t nwr = h / win, nwc = w / win;
    const std::int64_t b = x.dim(0) / (nwr * nwc);
    if (b * nwr * nwc != x.dim(0)) throw DimensionError("window_reverse: window count mismatch");
    auto map = [h, w, c, win, nwc](std::int64_t i) {
        const std::int64_t ch = i % c;
        std::int64_t t = i / c;
        const std::int64_t cc = t % w;
        t /= w;
        const std::int64_t r = t % h;
        const std::int64_t bi = t / h;
        const std::int64_t wr = r / win, ir = r % win;
        const std::int64_t wc = cc / win, ic = cc % win;
        const std::int64_t nw = (bi * (h / win) + wr) * nwc + wc;
        return (nw * win * win + ir * win + ic) * c + ch;
    };
    return indexed_gather(x, {b, h, w, c}, "window_reverse", map);
}

Tensor merge_gather(const Tensor& x) {
    if (x.ndim() != 4) throw DimensionError("merge_gather expects [B,h,w,C], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw DimensionError("merge_gather: grid sides must be even, got " + shape_str(x.shape()));
    // Neighborhood order: top-left, bottom-left, top-right, bottom-right.
    auto map = [h, w, c](std::int64_t i) {
        const std::int64_t ch = i % c;
        std::int64_t t = i / c;
        const std::int64_t blk = t % 4;
        t /= 4;
        const std::int64_t cc = t % (w / 2);
        t /= (w / 2);
        const std::int64_t rr = t % (h / 2);
        const std::int64_t bi = t / (h / 2);
        const std::int64_t r = 2 * rr + (blk == 1 || blk == 3 ? 1 : 0);
        const std::int64_t col = 2 * cc + (blk >= 2 ? 1 : 0);
        return ((bi * h + r) * w + col) * c + ch;
    };
    return indexed_gather(x, {b, h / 2, w / 2, 4 * c}, "merge_gather", map);
}

Tensor depth_to_space(const Tensor& x, std::int64_t factor) {
    if (x.ndim() != 4) throw DimensionError("depth_to_space expects [B,h,w,f*f*C], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), h = x.dim(1), w = x.dim(2), fc = x.dim(3);
    if (factor <= 0 || fc % (factor * factor) != 0)
        throw DimensionError("depth_to_space: channels not divisible by factor^2");
    const std::int64_t c = fc / (factor * factor);
    auto map = [h, w, c, fc, factor](std::int64_t i) {
        const std::int64_t wo = w * factor;
        const std::int64_t fx = i % wo;
        std::int64_t t = i / wo;
        const std::int64_t fy = t % (h * factor);
        t /= (h * factor);
        const std::int64_t ch = t % c;
        const std::int64_t bi = t / c;
        const std::int64_t r = fy / factor, dr = fy % factor;
        const std::int64_t cc = fx / factor, dc = fx % factor;
        const std::int64_t in_ch = (dr * factor + dc) * c + ch;
        return ((bi * h + r) * w + cc) * fc + in_ch;
    };
    return indexed_gather(x, {b, c, h * factor, w * factor}, "depth_to_space", map);
}

Tensor patchify(const Tensor& x, std::int64_t patch) {
    if (x.ndim() != 4) throw DimensionError("patchify expects [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ConfigError("patchify: image side not divisible by patch size " + std::to_string(patch));
    const std::int64_t gh = h / patch, gw = w / patch;
    auto map = [c, h, w, patch, gw](std::int64_t i) {
        const std::int64_t q = i % (c * patch * patch);
        std::int64_t t = i / (c * patch * patch);
        const std::int64_t gc = t % gw;
        t /= gw;
        const std::int64_t gr = t % (h / patch);
        const std::int64_t bi = t / (h / patch);
        const std::int64_t ci = q / (patch * patch);
        const std::int64_t rem = q % (patch * patch);
        const std::int64_t dy = rem / patch, dx = rem % patch;
        return ((bi * c + ci) * h + gr * patch + dy) * w + gc * patch + dx;
    };
    return indexed_gather(x, {b, gh, gw, c * patch * patch}, "patchify", map);
}

// ---- bilinear resize ----

Tensor bilinear_resize(const Tensor& x, std::int64_t ho, std::int64_t wo) {
    if (x.ndim() != 4) throw DimensionError("bilinear_resize expects [B,C,H,W], got " + shape_str(x.shape()));
    if (ho < 1 || wo < 1) throw ParameterError("bilinear_resize: target must be >= 1");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);

    struct Tap {
        std::int64_t i0, i1;
        double f;
    };
    auto taps = [](std::int64_t out_n, std::int64_t in_n) {
        std::vector<Tap> t(static_cast<std::size_t>(out_n));
        for (std::int64_t i = 0; i < out_n; ++i) {
            double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
            s = std::min(std::max(s, 0.0), static_cast<double>(in_n - 1));
            const auto i0 = static_cast<std::int64_t>(std::floor(s));
            t[static_cast<std::size_t>(i)] = {i0, std::min(i0 + 1, in_n - 1), s - static_cast<double>(i0)};
        }
        return t;
    };
    auto ty = std::make_shared<std::vector<Tap>>(taps(ho, h));
    auto tx = std::make_shared<std::vector<Tap>>(taps(wo, w));

    Tensor out = make_op_output({b, c, ho, wo}, x.dtype(), {x}, "bilinear_resize",
                                [x, ty, tx, b, c, h, w, ho, wo](const Tensor& gout) {
        dispatch(x.dtype(), [&](auto tag) {
            using T = decltype(tag);
            const T* gy = gout.data<T>().data();
            T* gx = grad_view(*x.impl()).template data<T>().data();
            for (std::int64_t bc = 0; bc < b * c; ++bc) {
                const T* gyp = gy + bc * ho * wo;
                T* gxp = gx + bc * h * w;
                for (std::int64_t oy = 0; oy < ho; ++oy) {
                    const auto& yt = (*ty)[static_cast<std::size_t>(oy)];
                    for (std::int64_t ox = 0; ox < wo; ++ox) {
                        const auto& xt = (*tx)[static_cast<std::size_t>(ox)];
                        const T g = gyp[oy * wo + ox];
                        const T fy = static_cast<T>(yt.f), fx = static_cast<T>(xt.f);
                        gxp[yt.i0 * w + xt.i0] += g * (T(1) - fy) * (T(1) - fx);
                        gxp[yt.i0 * w + xt.i1] += g * (T(1) - fy) * fx;
                        gxp[yt.i1 * w + xt.i0] += g * fy * (T(1) - fx);
                        gxp[yt.i1 * w + xt.i1] += g * fy * fx;
                    }
                }
            }
        });
    });

    dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        const T* xv = x.data<T>().data();
        T* ov = out.data<T>().data();
        for (std::int64_t bc = 0; bc < b * c; ++bc) {
            const T* xp = xv + bc * h * w;
            T* op = ov + bc * ho * wo;
            for (std::int64_t oy = 0; oy < ho; ++oy) {
                const auto& yt = (*ty)[static_cast<std::size_t>(oy)];
                for (std::int64_t ox = 0; ox < wo; ++ox) {
                    const auto& xt = (*tx)[static_cast<std::size_t>(ox)];
                    const T fy = static_cast<T>(yt.f), fx = static_cast<T>(xt.f);
                    op[oy * wo + ox] = xp[yt.i0 * w + xt.i0] * (T(1) - fy) * (T(1) - fx) +
                                       xp[yt.i0 * w + xt.i1] * (T(1) - fy) * fx +
                                       xp[yt.i1 * w + xt.i0] * fy * (T(1) - fx) +
                                       xp[yt.i1 * w + xt.i1] * fy * fx;
                }
            }
        }
    });
    return out;
}

}  // namespace gradloc
