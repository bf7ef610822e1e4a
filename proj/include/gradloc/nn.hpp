#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "gradloc/tensor.hpp"

namespace gradloc {

std::uint64_t splitmix64(std::uint64_t x);

// Deterministic random stream. Normal variates use Box-Muller on raw 64-bit
// draws so the sequence does not depend on the standard library's
// distribution implementations.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : seed_(seed), gen_(splitmix64(seed)) {}

    std::uint64_t next_u64() { return gen_(); }
    double uniform();                       // [0, 1)
    double normal();                        // N(0, 1)
    double trunc_normal(double stddev);     // N(0, stddev^2) restricted to |z| <= 2*stddev
    std::int64_t uniform_int(std::int64_t n);  // [0, n)

    // Independent substream keyed on (seed, tag).
    Rng child(std::uint64_t tag) const { return Rng(splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (tag + 1)))); }

  private:
    std::uint64_t seed_;
    std::mt19937_64 gen_;
};

Tensor trunc_normal_param(Shape shape, double stddev, Rng& rng, DType dtype);
Tensor zeros_param(Shape shape, DType dtype);
Tensor ones_param(Shape shape, DType dtype);
Tensor randn(Shape shape, Rng& rng, DType dtype = DType::F32);  // plain tensor

// Named parameter listing in a stable order; the canonical paths feed the
// optimizer, checkpoints and the isolation checks.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> items;

    void add(std::string name, const Tensor& t) { items.emplace_back(std::move(name), t); }
    void merge(const std::string& prefix, const ParamMap& other);
    std::vector<Tensor> tensors() const;
    std::int64_t total_elements() const;
};

struct Linear {
    Tensor w;  // [in, out]
    Tensor b;  // [out]; undefined when constructed without bias

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, Rng& rng, DType dt, bool bias = true);
    Tensor forward(const Tensor& x) const;  // x: [..., in]
    void collect(const std::string& prefix, ParamMap& out) const;
};

struct LayerNorm {
    Tensor gamma, beta;
    double eps = 1e-5;

    LayerNorm() = default;
    LayerNorm(std::int64_t c, DType dt);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamMap& out) const;
};

struct Conv2d {
    Tensor w;  // [Cout, Cin, k, k]
    Tensor b;  // [Cout]
    int stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(std::int64_t cin, std::int64_t cout, int k, int stride, int pad, Rng& rng, DType dt);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamMap& out) const;
};

struct ConvTranspose2d {
    Tensor w;  // [Cin, Cout, k, k]
    Tensor b;  // [Cout]
    int stride = 1;

    ConvTranspose2d() = default;
    ConvTranspose2d(std::int64_t cin, std::int64_t cout, int k, int stride, Rng& rng, DType dt);
    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamMap& out) const;
};

// AdamW with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
// A missing gradient buffer is an all-zero gradient; weight decay still
// applies to it.
struct AdamWOptions {
    double lr = 5e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class AdamW {
  public:
    AdamW() = default;
    AdamW(std::vector<Tensor> params, AdamWOptions opt);

    void step(double lr);
    void zero_grad();

    std::int64_t steps_taken() const { return t_; }
    void set_steps_taken(std::int64_t t) { t_ = t; }
    const std::vector<Tensor>& moments_m() const { return m_; }
    const std::vector<Tensor>& moments_v() const { return v_; }

  private:
    std::vector<Tensor> params_, m_, v_;
    AdamWOptions opt_;
    std::int64_t t_ = 0;
};

// lr = min_lr + 0.5 * (base - min_lr) * (1 + cos(pi * step / total))
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr, double min_lr);

}  // namespace gradloc
