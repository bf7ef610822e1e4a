#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "gradloc/auxloss.hpp"
#include "gradloc/gradcheck.hpp"

using namespace gradloc;

namespace {

// Direct loop evaluation of NT-Xent, independent of the tensor ops.
double ntxent_oracle(const std::vector<double>& emb, int b, int d, const std::vector<int>& labels,
                     double tau) {
    std::vector<double> z(emb.size());
    for (int i = 0; i < b; ++i) {
        double n2 = 0;
        for (int j = 0; j < d; ++j) n2 += emb[static_cast<std::size_t>(i * d + j)] * emb[static_cast<std::size_t>(i * d + j)];
        const double inv = 1.0 / std::sqrt(n2);
        for (int j = 0; j < d; ++j) z[static_cast<std::size_t>(i * d + j)] = emb[static_cast<std::size_t>(i * d + j)] * inv;
    }
    auto cos_ij = [&](int i, int j) {
        double s = 0;
        for (int q = 0; q < d; ++q) s += z[static_cast<std::size_t>(i * d + q)] * z[static_cast<std::size_t>(j * d + q)];
        return s;
    };
    double total = 0;
    int count = 0;
    for (int i = 0; i < b; ++i) {
        for (int j = 0; j < b; ++j) {
            if (i == j || labels[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(j)]) continue;
            double denom = 0;
            for (int k = 0; k < b; ++k)
                if (k != i) denom += std::exp(cos_ij(i, k) / tau);
            total += -std::log(std::exp(cos_ij(i, j) / tau) / denom);
            ++count;
        }
    }
    return count == 0 ? 0.0 : total / count;
}

}  // namespace

TEST_CASE("alpha/beta schedule matches the published lists") {
    auto k4 = alpha_beta_schedule(4);
    REQUIRE(k4.size() == 3);
    CHECK(k4[0].alpha == 3.0);
    CHECK(k4[0].beta == 1.0);
    CHECK(k4[1].alpha == 2.0);
    CHECK(k4[1].beta == 2.0);
    CHECK(k4[2].alpha == 1.0);
    CHECK(k4[2].beta == 3.0);

    auto k2 = alpha_beta_schedule(2);
    REQUIRE(k2.size() == 1);
    CHECK(k2[0].alpha == 3.0);
    CHECK(k2[0].beta == 1.0);

    auto k3 = alpha_beta_schedule(3);
    REQUIRE(k3.size() == 2);
    CHECK(k3[0].alpha == 3.0);
    CHECK(k3[1].alpha == 1.5);
    CHECK(k3[1].beta == 2.5);

    for (const auto& ab : k4) CHECK(ab.alpha + ab.beta == 4.0);
    CHECK_THROWS_AS(alpha_beta_schedule(1), ParameterError);
}

TEST_CASE("ntxent degenerate cases") {
    // Two identical embeddings with the same label: the sole negative is the
    // positive itself, so the loss is exactly 0.
    Tensor e = Tensor::from_data(std::vector<double>{1, 2, 3, 1, 2, 3}, {2, 3}, DType::F64);
    CHECK(ntxent_loss(e, {5, 5}, 0.1).item() == 0.0);

    // All labels distinct: no positive pair, exactly 0.
    Rng rng(1);
    Tensor r = randn({4, 8}, rng, DType::F64);
    CHECK(ntxent_loss(r, {0, 1, 2, 3}, 0.1).item() == 0.0);

    CHECK_THROWS_AS(ntxent_loss(r, {0, 1, 2, 3}, 0.0), ParameterError);
    CHECK_THROWS_AS(ntxent_loss(r, {0, 1, 2, 3}, -1.0), ParameterError);
    CHECK_THROWS_AS(ntxent_loss(randn({1, 8}, rng, DType::F64), {0}, 0.1), ParameterError);
}

TEST_CASE("ntxent equals the loop-based formula oracle") {
    Rng rng(2);
    for (int b : {4, 7, 16}) {
        const int d = 6;
        Tensor e = randn({b, d}, rng, DType::F64);
        std::vector<int> labels(static_cast<std::size_t>(b));
        for (int i = 0; i < b; ++i) labels[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(3));
        const double got = ntxent_loss(e, labels, 0.1).item();
        const double want = ntxent_oracle(e.to_doubles(), b, d, labels, 0.1);
        INFO("b=", b);
        CHECK(std::abs(got - want) < 1e-10);
    }

    // The spec's fixed case: B=4, labels [0,0,1,1].
    Tensor e4 = randn({4, 16}, rng, DType::F64);
    std::vector<int> lab{0, 0, 1, 1};
    CHECK(std::abs(ntxent_loss(e4, lab, 0.1).item() - ntxent_oracle(e4.to_doubles(), 4, 16, lab, 0.1)) <
          1e-10);
}

TEST_CASE("ntxent invariances") {
    Rng rng(3);
    Tensor e = randn({6, 10}, rng, DType::F64);
    std::vector<int> labels{0, 1, 0, 2, 1, 0};
    const double base = ntxent_loss(e, labels, 0.1).item();

    // Scale invariance: normalization happens inside the op.
    const double scaled = ntxent_loss(affine(e, 7.3, 0.0), labels, 0.1).item();
    CHECK(std::abs(base - scaled) < 1e-10);

    // Batch permutation invariance.
    std::vector<int> perm{3, 0, 5, 1, 4, 2};
    auto ev = e.to_doubles();
    std::vector<double> pe(ev.size());
    std::vector<int> pl(labels.size());
    for (int i = 0; i < 6; ++i) {
        pl[static_cast<std::size_t>(i)] = labels[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        for (int j = 0; j < 10; ++j)
            pe[static_cast<std::size_t>(i * 10 + j)] = ev[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] * 10 + j)];
    }
    const double permuted = ntxent_loss(Tensor::from_data(pe, {6, 10}, DType::F64), pl, 0.1).item();
    CHECK(std::abs(base - permuted) < 1e-10);

    // Gradients flow correctly through the whole expression.
    Tensor leafe = randn({5, 4}, rng, DType::F64);
    leafe.impl()->requires_grad = true;
    std::vector<int> lab5{0, 0, 1, 1, 0};
    auto r = check_gradients(
        "ntxent", [lab5](const std::vector<Tensor>& l) { return ntxent_loss(l[0], lab5, 0.1); }, {leafe});
    CHECK(r.pass);
}

TEST_CASE("bce analytic values and formula oracle") {
    // Zero logits against a feature target that squashes to 0.5: exactly ln 2.
    Tensor pred = Tensor::zeros({2, 2}, DType::F64);
    Tensor t0 = Tensor::zeros({2, 2}, DType::F64);  // sigmoid(0) = 0.5
    CHECK(recon_loss_bce(pred, t0, true).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));

    // Saturated correct prediction in image mode.
    Tensor hi = Tensor::full({3}, 30.0, DType::F64);
    Tensor ones = Tensor::full({3}, 1.0, DType::F64);
    CHECK(recon_loss_bce(hi, ones, false).item() < 1e-6);

    // Random 2x2 case against the per-element formula.
    Rng rng(5);
    Tensor p2 = randn({2, 2}, rng, DType::F64);
    Tensor raw = randn({2, 2}, rng, DType::F64);
    const double got = recon_loss_bce(p2, raw, true).item();
    auto pv = p2.to_doubles();
    auto tv = raw.to_doubles();
    double want = 0;
    for (int i = 0; i < 4; ++i) {
        const double prob = std::clamp(1.0 / (1.0 + std::exp(-pv[static_cast<std::size_t>(i)])), 1e-7, 1.0 - 1e-7);
        const double t = 1.0 / (1.0 + std::exp(-tv[static_cast<std::size_t>(i)]));
        want += -(t * std::log(prob) + (1 - t) * std::log(1 - prob));
    }
    want /= 4;
    CHECK(std::abs(got - want) < 1e-10);

    CHECK_THROWS_AS(recon_loss_bce(pred, Tensor::zeros({3}, DType::F64), true), DimensionError);
}

TEST_CASE("optimizing the prediction approaches the entropy floor") {
    Rng rng(7);
    Tensor target = randn({1, 1, 4, 4}, rng, DType::F64);
    auto tv = target.to_doubles();
    double floor = 0;
    for (double raw : tv) {
        const double t = 1.0 / (1.0 + std::exp(-raw));
        floor += -(t * std::log(t) + (1 - t) * std::log(1 - t));
    }
    floor /= static_cast<double>(tv.size());

    Tensor pred = Tensor::zeros({1, 1, 4, 4}, DType::F64, /*requires_grad=*/true);
    AdamWOptions opt;
    opt.weight_decay = 0.0;
    AdamW optim({pred}, opt);
    double last = 0;
    for (int step = 0; step < 500; ++step) {
        Tensor loss = recon_loss_bce(pred, target, true);
        last = loss.item();
        if (last - floor < 1e-3) break;
        backward(loss);
        optim.step(0.05);
        optim.zero_grad();
    }
    CHECK(last - floor < 1e-3);
    CHECK(last >= floor - 1e-9);  // BCE is bounded below by the target entropy
}

TEST_CASE("cross entropy analytic values and oracle") {
    Tensor uniform = Tensor::zeros({4, 10}, DType::F64);
    CHECK(cross_entropy(uniform, {0, 3, 9, 5}).item() == doctest::Approx(std::log(10.0)).epsilon(1e-9));

    // Dominant correct logit saturates to ~0 loss.
    Tensor dom = Tensor::zeros({1, 4}, DType::F64);
    dom.data<double>()[2] = 30.0;
    CHECK(cross_entropy(dom, {2}).item() < 1e-9);

    Rng rng(9);
    Tensor lg = randn({3, 4}, rng, DType::F64);
    std::vector<int> labels{1, 0, 3};
    auto lv = lg.to_doubles();
    double want = 0;
    for (int i = 0; i < 3; ++i) {
        double denom = 0;
        for (int c = 0; c < 4; ++c) denom += std::exp(lv[static_cast<std::size_t>(i * 4 + c)]);
        want += -std::log(std::exp(lv[static_cast<std::size_t>(i * 4 + labels[static_cast<std::size_t>(i)])]) / denom);
    }
    want /= 3;
    CHECK(std::abs(cross_entropy(lg, labels).item() - want) < 1e-10);

    CHECK_THROWS_AS(cross_entropy(lg, {1, 0, 4}), DataError);

    Tensor leafl = randn({3, 4}, rng, DType::F64);
    leafl.impl()->requires_grad = true;
    auto r = check_gradients(
        "cross_entropy",
        [labels](const std::vector<Tensor>& l) { return cross_entropy(l[0], labels); }, {leafl});
    CHECK(r.pass);
}

TEST_CASE("aux_reduce shape rule") {
    Rng rng(11);
    AuxBlock aux = make_aux_block(1, 96, 8, 16, 48, DecoderKind::Interp, ReconTarget::Feature, {3, 1}, 0.1,
                                  128, true, rng, DType::F32);
    CHECK(aux.c_aux == 48);  // max(96/2, 16)
    NoGradGuard ng;
    Tensor g = randn({2, 8, 8, 96}, rng, DType::F32);
    Tensor red = aux_reduce(aux, g);
    CHECK(red.shape() == Shape{2, 48, 8, 8});  // spatial dims preserved

    AuxBlock small = make_aux_block(1, 24, 8, 8, 24, DecoderKind::Interp, ReconTarget::Feature, {3, 1}, 0.1,
                                    128, true, rng, DType::F32);
    CHECK(small.c_aux == 16);  // floor of the reduction rule
}

TEST_CASE("decoder output shapes for all kinds and factors") {
    Rng rng(13);
    NoGradGuard ng;
    for (auto kind : {DecoderKind::Interp, DecoderKind::Linear, DecoderKind::Deconv}) {
        for (int factor : {1, 2, 4}) {
            Decoder dec(kind, 24, 12, factor, rng, DType::F32);
            Tensor feat = randn({2, 24, 4, 4}, rng, DType::F32);
            Tensor out = dec.forward(feat);
            INFO(to_string(kind), " factor ", factor);
            CHECK(out.shape() == Shape{2, 12, 4 * factor, 4 * factor});
        }
    }
    // Factor 8 composes 4x then 2x deconv stages; factor 3 is unreachable.
    Decoder d8(DecoderKind::Deconv, 16, 3, 8, rng, DType::F32);
    CHECK(d8.ups.size() == 2);
    CHECK(d8.forward(randn({1, 16, 2, 2}, rng, DType::F32)).shape() == Shape{1, 3, 16, 16});
    CHECK_THROWS_AS(Decoder(DecoderKind::Deconv, 16, 3, 3, rng, DType::F32), ConfigError);
}

TEST_CASE("linear decoder parameter count and depth-to-space layout") {
    Rng rng(15);
    const std::int64_t c_aux = 24, c_t = 12;
    Decoder dec(DecoderKind::Linear, c_aux, c_t, 2, rng, DType::F32);
    ParamMap pm;
    dec.collect("dec", pm);
    CHECK(pm.total_elements() == c_aux * (4 * c_t) + 4 * c_t);

    // Depth-to-space: output pixel (2r+dr, 2c+dc) of channel ch comes from
    // token (r,c) channel block (dr*2+dc).
    const int h = 2, w = 2, c = 3, f = 2;
    std::vector<float> vals(h * w * f * f * c);
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<float>(i);
    Tensor x = Tensor::from_data(vals, {1, h, w, f * f * c});
    Tensor y = depth_to_space(x, f);
    CHECK(y.shape() == Shape{1, c, h * f, w * f});
    auto yv = y.data<float>();
    for (int r = 0; r < h; ++r)
        for (int cc = 0; cc < w; ++cc)
            for (int dr = 0; dr < f; ++dr)
                for (int dc = 0; dc < f; ++dc)
                    for (int ch = 0; ch < c; ++ch) {
                        const int in_flat = ((r * w + cc) * f * f + (dr * f + dc)) * c + ch;
                        const int oy = r * f + dr, ox = cc * f + dc;
                        const float got = yv[static_cast<std::size_t>((ch * h * f + oy) * w * f + ox)];
                        CHECK(got == static_cast<float>(in_flat));
                    }
}

TEST_CASE("local loss combines branches linearly and isolates the target") {
    Rng rng(17);
    const std::vector<int> labels{0, 1, 0, 1};

    auto build = [&](AlphaBeta ab, bool with_decoder) {
        Rng local(99);
        return make_aux_block(1, 32, 8, 16, 16, DecoderKind::Interp, ReconTarget::Feature, ab, 0.1, 32,
                              with_decoder, local, DType::F64);
    };

    Rng drng(18);
    Tensor x_i = randn({4, 8, 8, 32}, drng, DType::F64);
    Tensor target = randn({4, 16, 16, 16}, drng, DType::F64);

    auto [t31, bd31] = local_loss(build({3, 1}, true), x_i, target, labels);
    CHECK(bd31.total == doctest::Approx(3 * bd31.recon + 1 * bd31.contrast).epsilon(1e-12));
    CHECK(3.0 * 0.5 + 1.0 * 0.2 == 1.7);  // the combination rule on stated values

    // beta = 0 leaves exactly alpha * recon; alpha = 0 (no decoder branch)
    // leaves exactly beta * contrast.
    auto [t30, bd30] = local_loss(build({3, 0}, true), x_i, target, labels);
    CHECK(bd30.total == doctest::Approx(3 * bd30.recon).epsilon(1e-12));
    auto [t04, bd04] = local_loss(build({0, 4}, false), x_i, target, labels);
    CHECK(bd04.total == doctest::Approx(4 * bd04.contrast).epsilon(1e-12));
    CHECK(bd04.recon == 0.0);

    // No gradient reaches the target path: build the target from its own
    // leaf, detach, and verify the leaf stays gradient-free.
    Tensor v = Tensor::zeros({4, 16, 16, 16}, DType::F64, /*requires_grad=*/true);
    Tensor tgt = detach(affine(v, 1.0, 0.1));
    Tensor xi2 = randn({4, 8, 8, 32}, drng, DType::F64);
    xi2.impl()->requires_grad = true;
    AuxBlock aux = build({3, 1}, true);
    auto [total, bd] = local_loss(aux, xi2, tgt, labels);
    backward(total);
    CHECK_FALSE(v.grad().defined());
    CHECK(xi2.grad().defined());

    // A tape-attached target is rejected outright.
    Tensor attached = affine(v, 1.0, 0.1);
    CHECK_THROWS_AS(local_loss(aux, xi2, attached, labels), ContractError);
}
