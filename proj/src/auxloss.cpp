#include "gradloc/auxloss.hpp"

#include <algorithm>
#include <cmath>

namespace gradloc {

DecoderKind decoder_kind_from_string(const std::string& s) {
    if (s == "interp") return DecoderKind::Interp;
    if (s == "linear") return DecoderKind::Linear;
    if (s == "deconv") return DecoderKind::Deconv;
    throw ParameterError("unknown decoder kind: " + s);
}

ReconTarget recon_target_from_string(const std::string& s) {
    if (s == "feature") return ReconTarget::Feature;
    if (s == "image") return ReconTarget::Image;
    throw ParameterError("unknown reconstruction target: " + s);
}

std::string to_string(DecoderKind k) {
    switch (k) {
        case DecoderKind::Interp: return "interp";
        case DecoderKind::Linear: return "linear";
        case DecoderKind::Deconv: return "deconv";
    }
    return "?";
}

std::string to_string(ReconTarget t) { return t == ReconTarget::Feature ? "feature" : "image"; }

std::vector<AlphaBeta> alpha_beta_schedule(int k) {
    if (k < 2) throw ParameterError("alpha_beta_schedule requires k >= 2, got " + std::to_string(k));
    std::vector<AlphaBeta> out;
    out.reserve(static_cast<std::size_t>(k) - 1);
    for (int i = 1; i <= k - 1; ++i) {
        const double alpha = 3.0 * static_cast<double>(k - i) / static_cast<double>(k - 1);
        out.push_back({alpha, 4.0 - alpha});
    }
    return out;
}

namespace {

// Deconv stage plan: compose the factor from {4, 2} kernels, largest first.
std::vector<int> deconv_stages(int factor) {
    std::vector<int> stages;
    int f = factor;
    while (f > 1) {
        if (f % 4 == 0) {
            stages.push_back(4);
            f /= 4;
        } else if (f % 2 == 0) {
            stages.push_back(2);
            f /= 2;
        } else {
            throw ConfigError("deconv decoder: factor " + std::to_string(factor) +
                              " is not a composition of 2x and 4x stages");
        }
    }
    return stages;
}

}  // namespace

Decoder::Decoder(DecoderKind kind_, std::int64_t c_aux, std::int64_t target_channels_, int factor_,
                 Rng& rng, DType dt)
    : kind(kind_), factor(factor_), target_channels(target_channels_) {
    if (factor < 1) throw ConfigError("decoder: upscale factor must be >= 1");
    if (factor == 1) {
        out1x1 = Conv2d(c_aux, target_channels, 1, 1, 0, rng, dt);
        return;
    }
    switch (kind) {
        case DecoderKind::Interp:
            pre = Conv2d(c_aux, c_aux, 3, 1, 1, rng, dt);
            out1x1 = Conv2d(c_aux, target_channels, 1, 1, 0, rng, dt);
            break;
        case DecoderKind::Linear:
            expand = Conv2d(c_aux, static_cast<std::int64_t>(factor) * factor * target_channels, 1, 1, 0,
                            rng, dt);
            break;
        case DecoderKind::Deconv: {
            for (int k : deconv_stages(factor)) ups.emplace_back(c_aux, c_aux, k, k, rng, dt);
            out1x1 = Conv2d(c_aux, target_channels, 1, 1, 0, rng, dt);
            break;
        }
    }
}

Tensor Decoder::forward(const Tensor& feat) const {
    if (factor == 1) return out1x1.forward(feat);
    switch (kind) {
        case DecoderKind::Interp: {
            Tensor x = bilinear_resize(feat, feat.dim(2) * factor, feat.dim(3) * factor);
            x = gelu(pre.forward(x));
            return out1x1.forward(x);
        }
        case DecoderKind::Linear: {
            Tensor x = expand.forward(feat);           // [B, f^2*C_t, h, w]
            x = permute(x, {0, 2, 3, 1});              // [B, h, w, f^2*C_t]
            return depth_to_space(x, factor);          // [B, C_t, f*h, f*w]
        }
        case DecoderKind::Deconv: {
            Tensor x = feat;
            for (std::size_t i = 0; i < ups.size(); ++i) {
                x = ups[i].forward(x);
                if (i + 1 < ups.size()) x = gelu(x);
            }
            return out1x1.forward(x);
        }
    }
    throw ContractError("decoder: unknown kind");
}

void Decoder::collect(const std::string& prefix, ParamMap& out) const {
    if (pre.w.defined()) pre.collect(prefix + ".pre", out);
    for (std::size_t i = 0; i < ups.size(); ++i) ups[i].collect(prefix + ".up" + std::to_string(i), out);
    if (expand.w.defined()) expand.collect(prefix + ".expand", out);
    if (out1x1.w.defined()) out1x1.collect(prefix + ".out", out);
}

void AuxBlock::collect(const std::string& prefix, ParamMap& out) const {
    ln.collect(prefix + ".ln", out);
    reduce.collect(prefix + ".reduce", out);
    contrast_head.collect(prefix + ".contrast", out);
    if (decoder) decoder->collect(prefix + ".decoder", out);
}

AuxBlock make_aux_block(int module_index, std::int64_t in_channels, std::int64_t out_side,
                        std::int64_t target_side, std::int64_t target_channels, DecoderKind kind,
                        ReconTarget target, AlphaBeta weights, double tau, std::int64_t contrast_dim,
                        bool with_decoder, Rng& rng, DType dt) {
    if (tau <= 0) throw ParameterError("aux block: tau must be positive");
    AuxBlock aux;
    aux.module_index = module_index;
    aux.c_aux = std::max<std::int64_t>(in_channels / 2, 16);
    aux.ln = LayerNorm(in_channels, dt);
    aux.reduce = Conv2d(in_channels, aux.c_aux, 3, 1, 1, rng, dt);
    aux.contrast_head = Linear(aux.c_aux, contrast_dim, rng, dt);
    aux.tau = tau;
    aux.weights = weights;
    aux.target = target;
    if (with_decoder) {
        if (target_side % out_side != 0)
            throw ConfigError("aux block: target side " + std::to_string(target_side) +
                              " not a multiple of module output side " + std::to_string(out_side));
        const int factor = static_cast<int>(target_side / out_side);
        aux.decoder = Decoder(kind, aux.c_aux, target_channels, factor, rng, dt);
    }
    return aux;
}

Tensor aux_reduce(const AuxBlock& aux, const Tensor& grid) {
    Tensor x = aux.ln.forward(grid);     // [B,h,w,C]
    x = permute(x, {0, 3, 1, 2});        // [B,C,h,w]
    return gelu(aux.reduce.forward(x));  // [B,c_aux,h,w]
}

Tensor ntxent_loss(const Tensor& embeddings, const std::vector<int>& labels, double tau) {
    if (tau <= 0) throw ParameterError("ntxent_loss: tau must be positive");
    if (embeddings.ndim() != 2) throw DimensionError("ntxent_loss expects [B,d] embeddings");
    const std::int64_t b = embeddings.dim(0);
    if (b < 2) throw ParameterError("ntxent_loss: batch must hold at least two samples");
    if (static_cast<std::int64_t>(labels.size()) != b)
        throw DimensionError("ntxent_loss: label count does not match batch");

    Tensor norm = sqrt(sum_axes(mul(embeddings, embeddings), {1}, true));  // [B,1]
    Tensor z = div(embeddings, norm);
    Tensor logits = affine(matmul(z, z, /*transpose_b=*/true), 1.0 / tau, 0.0);  // [B,B]

    // Exclude self-similarity from every denominator.
    Tensor diag = Tensor::zeros({b, b}, embeddings.dtype());
    detail::dispatch(embeddings.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto dv = diag.data<T>();
        for (std::int64_t i = 0; i < b; ++i) dv[static_cast<std::size_t>(i * b + i)] = T(-1e9);
    });
    Tensor masked = add(logits, diag);
    Tensor mx = max_axis_detached(masked, 1, true);
    Tensor lse = add(log(sum_axes(exp(sub(masked, mx)), {1}, true)), mx);  // [B,1]

    // Ordered positive pairs (i, j), i != j, same label.
    Tensor pos = Tensor::zeros({b, b}, embeddings.dtype());
    std::int64_t n_pos = 0;
    detail::dispatch(embeddings.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto pv = pos.data<T>();
        for (std::int64_t i = 0; i < b; ++i) {
            for (std::int64_t j = 0; j < b; ++j) {
                if (i != j && labels[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(j)]) {
                    pv[static_cast<std::size_t>(i * b + j)] = T(1);
                    ++n_pos;
                }
            }
        }
    });

    Tensor per_pair = neg(sub(logits, lse));  // lse_i - logits_ij = -log p_ij
    return affine(sum(mul(per_pair, pos)), 1.0 / static_cast<double>(std::max<std::int64_t>(n_pos, 1)), 0.0);
}

Tensor recon_loss_bce(const Tensor& pred_logits, const Tensor& target, bool squash_target) {
    if (pred_logits.shape() != target.shape())
        throw DimensionError("recon_loss_bce: prediction " + shape_str(pred_logits.shape()) +
                             " and target " + shape_str(target.shape()) + " disagree");
    if (target.needs_grad()) throw ContractError("recon_loss_bce: target must be detached");

    Tensor t = squash_target ? sigmoid(target) : target;
    Tensor p = clamp(sigmoid(pred_logits), 1e-7, 1.0 - 1e-7);
    Tensor one_minus_p = affine(p, -1.0, 1.0);
    Tensor one_minus_t = affine(t, -1.0, 1.0);
    return neg(mean(add(mul(t, log(p)), mul(one_minus_t, log(one_minus_p)))));
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) throw DimensionError("cross_entropy expects [B,C] logits");
    const std::int64_t b = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != b)
        throw DimensionError("cross_entropy: label count does not match batch");
    auto map = std::make_shared<std::vector<std::int64_t>>();
    map->reserve(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= c)
            throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(c) + ")");
        map->push_back(i * c + y);
    }
    Tensor mx = max_axis_detached(logits, 1, true);
    Tensor lse = add(log(sum_axes(exp(sub(logits, mx)), {1}, true)), mx);  // [B,1]
    Tensor picked = gather_flat(logits, map, {b});
    return mean(sub(reshape(lse, {b}), picked));
}

std::pair<Tensor, LossBreakdown> local_loss(const AuxBlock& aux, const Tensor& x_i, const Tensor& target,
                                            const std::vector<int>& labels) {
    if (target.needs_grad()) throw ContractError("local_loss: reconstruction target must be detached");

    Tensor red = aux_reduce(aux, x_i);                       // [B,c_aux,h,w]
    Tensor pooled = mean_axes(red, {2, 3}, false);           // [B,c_aux]
    Tensor emb = aux.contrast_head.forward(pooled);          // [B,d]
    Tensor contrast = ntxent_loss(emb, labels, aux.tau);

    LossBreakdown bd;
    bd.contrast = contrast.item();

    Tensor total;
    if (aux.decoder) {
        Tensor tgt = target;
        if (aux.target == ReconTarget::Feature) tgt = permute(target, {0, 3, 1, 2});  // grid -> channel-major
        Tensor pred = aux.decoder->forward(red);
        Tensor recon = recon_loss_bce(pred, tgt, aux.target == ReconTarget::Feature);
        bd.recon = recon.item();
        total = add(affine(recon, aux.weights.alpha, 0.0), affine(contrast, aux.weights.beta, 0.0));
    } else {
        total = affine(contrast, aux.weights.beta, 0.0);
    }
    bd.total = total.item();
    return {total, bd};
}

}  // namespace gradloc
