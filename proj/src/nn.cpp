#include "gradloc/nn.hpp"

#include <cmath>
#include <numbers>

namespace gradloc {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::trunc_normal(double stddev) {
    for (;;) {
        const double z = normal();
        if (std::abs(z) <= 2.0) return z * stddev;
    }
}

std::int64_t Rng::uniform_int(std::int64_t n) {
    // Rejection to avoid modulo bias.
    const auto un = static_cast<std::uint64_t>(n);
    const std::uint64_t lim = UINT64_MAX - UINT64_MAX % un;
    for (;;) {
        const std::uint64_t v = next_u64();
        if (v < lim) return static_cast<std::int64_t>(v % un);
    }
}

Tensor trunc_normal_param(Shape shape, double stddev, Rng& rng, DType dtype) {
    Tensor t = Tensor::zeros(std::move(shape), dtype, true);
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.data<T>()) v = static_cast<T>(rng.trunc_normal(stddev));
    });
    return t;
}

Tensor zeros_param(Shape shape, DType dtype) { return Tensor::zeros(std::move(shape), dtype, true); }

Tensor ones_param(Shape shape, DType dtype) {
    Tensor t = Tensor::zeros(std::move(shape), dtype, true);
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.data<T>()) v = T(1);
    });
    return t;
}

Tensor randn(Shape shape, Rng& rng, DType dtype) {
    Tensor t = Tensor::zeros(std::move(shape), dtype);
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        for (auto& v : t.data<T>()) v = static_cast<T>(rng.normal());
    });
    return t;
}

void ParamMap::merge(const std::string& prefix, const ParamMap& other) {
    for (const auto& [name, t] : other.items) add(prefix + name, t);
}

std::vector<Tensor> ParamMap::tensors() const {
    std::vector<Tensor> out;
    out.reserve(items.size());
    for (const auto& [name, t] : items) out.push_back(t);
    return out;
}

std::int64_t ParamMap::total_elements() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
}

Linear::Linear(std::int64_t in, std::int64_t out, Rng& rng, DType dt, bool bias)
    : w(trunc_normal_param({in, out}, 0.02, rng, dt)) {
    if (bias) b = zeros_param({out}, dt);
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul(x, w);
    if (b.defined()) y = add(y, b);
    return y;
}

void Linear::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".w", w);
    if (b.defined()) out.add(prefix + ".b", b);
}

LayerNorm::LayerNorm(std::int64_t c, DType dt) : gamma(ones_param({c}, dt)), beta(zeros_param({c}, dt)) {}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".g", gamma);
    out.add(prefix + ".b", beta);
}

Conv2d::Conv2d(std::int64_t cin, std::int64_t cout, int k, int stride_, int pad_, Rng& rng, DType dt)
    : w(trunc_normal_param({cout, cin, k, k}, 0.02, rng, dt)),
      b(zeros_param({cout}, dt)),
      stride(stride_),
      pad(pad_) {}

Tensor Conv2d::forward(const Tensor& x) const {
    Tensor y = conv2d(x, w, stride, pad);
    return add(y, reshape(b, {b.dim(0), 1, 1}));
}

void Conv2d::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

ConvTranspose2d::ConvTranspose2d(std::int64_t cin, std::int64_t cout, int k, int stride_, Rng& rng, DType dt)
    : w(trunc_normal_param({cin, cout, k, k}, 0.02, rng, dt)), b(zeros_param({cout}, dt)), stride(stride_) {}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
    Tensor y = conv_transpose2d(x, w, stride);
    return add(y, reshape(b, {b.dim(0), 1, 1}));
}

void ConvTranspose2d::collect(const std::string& prefix, ParamMap& out) const {
    out.add(prefix + ".w", w);
    out.add(prefix + ".b", b);
}

AdamW::AdamW(std::vector<Tensor> params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        m_.push_back(Tensor::zeros(p.shape(), p.dtype()));
        v_.push_back(Tensor::zeros(p.shape(), p.dtype()));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        Tensor g = p.grad();
        detail::dispatch(p.dtype(), [&](auto tag) {
            using T = decltype(tag);
            auto pv = p.data<T>();
            auto mv = m_[i].data<T>();
            auto vv = v_[i].data<T>();
            const T* gv = g.defined() ? g.data<T>().data() : nullptr;
            for (std::size_t j = 0; j < pv.size(); ++j) {
                const double gj = gv ? static_cast<double>(gv[j]) : 0.0;
                const double m = opt_.beta1 * static_cast<double>(mv[j]) + (1.0 - opt_.beta1) * gj;
                const double v = opt_.beta2 * static_cast<double>(vv[j]) + (1.0 - opt_.beta2) * gj * gj;
                mv[j] = static_cast<T>(m);
                vv[j] = static_cast<T>(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                pv[j] = static_cast<T>(static_cast<double>(pv[j]) -
                                       lr * (mhat / (std::sqrt(vhat) + opt_.eps) +
                                             opt_.weight_decay * static_cast<double>(pv[j])));
            }
        });
    }
}

void AdamW::zero_grad() {
    for (auto& p : params_) p.clear_grad();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr) {
    if (step < 0 || step > total_steps || total_steps <= 0)
        throw ParameterError("cosine_lr: step must lie in [0, total_steps]");
    const double x = static_cast<double>(step) / static_cast<double>(total_steps);
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * x));
}

}  // namespace gradloc
