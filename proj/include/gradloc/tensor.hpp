#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradloc/errors.hpp"

namespace gradloc {

enum class DType : std::uint8_t { F32, F64 };

inline std::size_t dtype_size(DType d) { return d == DType::F32 ? 4 : 8; }
const char* dtype_name(DType d);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Process-wide accounting of logical tensor buffer bytes. live_bytes tracks
// every Storage currently alive; peak_bytes is the high-water mark since the
// last reset_peak(). Counters are atomic so independent tapes can run
// concurrently.
namespace memstats {
std::int64_t live_bytes();
std::int64_t peak_bytes();
void reset_peak();
}  // namespace memstats

// allocation_stats() -> (live_bytes, peak_bytes)
std::pair<std::int64_t, std::int64_t> allocation_stats();

// Owns one raw byte buffer and keeps the live/peak counters current for its
// whole lifetime.
class Storage {
  public:
    explicit Storage(std::size_t nbytes);
    ~Storage();
    Storage(const Storage&) = delete;
    Storage& operator=(const Storage&) = delete;

    std::byte* data() { return bytes_.data(); }
    const std::byte* data() const { return bytes_.data(); }
    std::size_t nbytes() const { return bytes_.size(); }

  private:
    std::vector<std::byte> bytes_;
};

class Tensor;
struct TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

// One recorded primitive application. Owned by the output tensor. Holds its
// inputs (and whatever the closure saved) alive until backward consumes the
// graph, at which point both are released.
struct Node {
    std::vector<ImplPtr> inputs;
    std::function<void(const Tensor& grad_out)> backward;
    const char* op = "";
};

struct TensorImpl {
    Shape shape;
    DType dtype = DType::F32;
    std::int64_t numel = 0;
    std::shared_ptr<Storage> value;
    std::shared_ptr<Storage> grad;  // materialized on first accumulation
    std::shared_ptr<Node> node;     // null for leaves and constants
    bool requires_grad = false;     // leaf flag; intermediates carry a node

    bool needs_grad() const { return requires_grad || node != nullptr; }
};

// Dense row-major tensor handle. Copying a Tensor aliases the same buffer;
// values are immutable after creation except for gradient accumulation and
// in-place optimizer/loader updates on leaves.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(ImplPtr impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape, DType dtype = DType::F32, bool requires_grad = false);
    static Tensor full(Shape shape, double v, DType dtype = DType::F32);
    static Tensor scalar(double v, DType dtype = DType::F32);
    static Tensor from_data(const std::vector<float>& v, Shape shape);
    static Tensor from_data(const std::vector<double>& v, Shape shape, DType dtype = DType::F64);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t numel() const { return impl_->numel; }
    DType dtype() const { return impl_->dtype; }
    std::size_t nbytes() const { return static_cast<std::size_t>(impl_->numel) * dtype_size(impl_->dtype); }

    template <typename T>
    std::span<T> data() {
        check_dtype<T>();
        return {reinterpret_cast<T*>(impl_->value->data()), static_cast<std::size_t>(impl_->numel)};
    }
    template <typename T>
    std::span<const T> data() const {
        check_dtype<T>();
        return {reinterpret_cast<const T*>(impl_->value->data()), static_cast<std::size_t>(impl_->numel)};
    }

    double item() const;                  // numel == 1
    std::vector<double> to_doubles() const;
    Tensor clone() const;                 // deep copy of the value buffer, detached

    bool requires_grad() const { return impl_->requires_grad; }
    bool has_node() const { return impl_->node != nullptr; }
    bool needs_grad() const { return impl_->needs_grad(); }

    // Gradient buffer as a plain tensor view; undefined Tensor if not
    // materialized yet (a missing gradient is an all-zero gradient).
    Tensor grad() const;
    void clear_grad();

    Tensor detach() const;
    void backward() const;

    const ImplPtr& impl() const { return impl_; }

  private:
    template <typename T>
    void check_dtype() const {
        const bool ok = (std::is_same_v<T, float> && impl_->dtype == DType::F32) ||
                        (std::is_same_v<T, double> && impl_->dtype == DType::F64);
        if (!ok) throw ContractError("typed access does not match tensor dtype");
    }

    ImplPtr impl_;
};

bool grad_enabled();

// Disables tape recording for its scope (evaluation, finite differences).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// ---- primitive operations ----

enum class EwKind { Add, Sub, Mul, Div };
enum class ActKind { Gelu, Sigmoid };

// b must have shape equal to a, or broadcast into a right-aligned: each
// trailing dimension of b equal to a's or 1. The result always has a's shape.
Tensor elementwise(const Tensor& a, const Tensor& b, EwKind kind);
inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Mul); }
inline Tensor div(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwKind::Div); }

// a: [..., m, k]; b: [..., k, n] with identical leading dims, or 2-D and
// shared across the batch. transpose_b treats b as [..., n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor affine(const Tensor& x, double scale, double shift);  // scale * x + shift
inline Tensor neg(const Tensor& x) { return affine(x, -1.0, 0.0); }
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor gelu(const Tensor& x);     // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor activation(const Tensor& x, ActKind kind);

Tensor softmax(const Tensor& x, int axis);

// Normalizes over the last dimension; gamma/beta are 1-D of that size.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw]. Cross-correlation, no bias.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// x: [B,Cin,H,W], w: [Cin,Cout,kh,kw]. Adjoint of conv2d (scatter-add), no pad.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride);

Tensor reshape(const Tensor& x, Shape shape);       // shares the value buffer
Tensor permute(const Tensor& x, std::vector<int> axes);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axes(const Tensor& x, std::vector<int> axes, bool keepdim);
Tensor mean_axes(const Tensor& x, std::vector<int> axes, bool keepdim);
// Max along one axis, returned as a constant (used for numerical stability;
// no gradient flows through it).
Tensor max_axis_detached(const Tensor& x, int axis, bool keepdim);

// y.flat[i] = x.flat[map[i]]; backward scatter-adds (repeated indices allowed).
Tensor gather_flat(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> map, Shape out_shape);
// Contiguous slice along axis 0.
Tensor narrow0(const Tensor& x, std::int64_t start, std::int64_t len);

// x: [B,C,H,W] -> [B,C,Ho,Wo], half-pixel-center convention.
Tensor bilinear_resize(const Tensor& x, std::int64_t ho, std::int64_t wo);

// Token-grid rearrangements; x is [B,h,w,C] unless noted. All are bijections
// with exact inverses.
Tensor roll2d(const Tensor& x, std::int64_t dr, std::int64_t dc);    // cyclic shift of rows/cols
Tensor window_partition(const Tensor& x, std::int64_t win);          // -> [B*nW, win*win, C]
Tensor window_reverse(const Tensor& x, std::int64_t win, std::int64_t h, std::int64_t w);
Tensor merge_gather(const Tensor& x);                                // -> [B,h/2,w/2,4C], TL,BL,TR,BR order
Tensor depth_to_space(const Tensor& x, std::int64_t factor);         // [B,h,w,f*f*C] -> [B,C,f*h,f*w]
Tensor patchify(const Tensor& x, std::int64_t patch);                // [B,C,H,W] -> [B,h,w,C*p*p]

Tensor detach(const Tensor& x);
void backward(const Tensor& loss);

// Leaf tensors reachable from this value's tape (structural isolation checks).
std::vector<ImplPtr> reachable_leaves(const Tensor& loss);

namespace detail {
// Creates the op output; records a node when grad mode is on and any parent
// needs gradient. `parents` lists only inputs that participate in backward.
Tensor make_op_output(Shape shape, DType dtype, std::vector<Tensor> parents, const char* op,
                      std::function<void(const Tensor&)> backward_fn);
// Materializes (zero-filled) and views the gradient buffer of an impl.
Tensor grad_view(TensorImpl& impl);

template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
    switch (dt) {
        case DType::F32: return f(float{});
        case DType::F64: return f(double{});
    }
    throw ContractError("unknown dtype");
}
}  // namespace detail

}  // namespace gradloc
