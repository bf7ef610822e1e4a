#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradloc/nn.hpp"
#include "gradloc/tensor.hpp"

namespace gradloc {

enum class DecoderKind { Interp, Linear, Deconv };
enum class ReconTarget { Feature, Image };

DecoderKind decoder_kind_from_string(const std::string& s);
ReconTarget recon_target_from_string(const std::string& s);
std::string to_string(DecoderKind k);
std::string to_string(ReconTarget t);

// Per-module loss weights. Reconstruction weight decreases linearly with
// depth while the contrastive weight increases; they always sum to 4.
struct AlphaBeta {
    double alpha = 0.0;
    double beta = 0.0;
};

// Weights for modules 1..K-1. The final module trains on plain cross-entropy
// (the (0,4) endpoint of the published list) and gets no auxiliary block.
std::vector<AlphaBeta> alpha_beta_schedule(int k);

// Reconstruction decoder mapping [B,c_aux,h,w] to the target's full shape.
struct Decoder {
    DecoderKind kind = DecoderKind::Interp;
    int factor = 1;
    std::int64_t target_channels = 0;

    Conv2d pre;                        // interp: 3x3, pad 1, c_aux -> c_aux
    std::vector<ConvTranspose2d> ups;  // deconv: kernel == stride in {2,4}
    Conv2d expand;                     // linear: 1x1, c_aux -> factor^2 * C_t
    Conv2d out1x1;                     // final 1x1 to target channels

    Decoder() = default;
    Decoder(DecoderKind kind, std::int64_t c_aux, std::int64_t target_channels, int factor, Rng& rng,
            DType dt);
    Tensor forward(const Tensor& feat) const;
    void collect(const std::string& prefix, ParamMap& out) const;
};

// The auxiliary block F^i: LN + convolutional reduction feeding a contrastive
// branch and an optional reconstruction branch.
struct AuxBlock {
    int module_index = 1;
    std::int64_t c_aux = 0;
    LayerNorm ln;            // over the module's output channels
    Conv2d reduce;           // 3x3, pad 1, C_i -> c_aux
    Linear contrast_head;    // c_aux -> embedding dim
    double tau = 0.1;
    AlphaBeta weights;
    ReconTarget target = ReconTarget::Feature;
    std::optional<Decoder> decoder;  // absent in greedy-contrast mode

    void collect(const std::string& prefix, ParamMap& out) const;
};

// in_channels/out_side describe the module output x_i; target_side and
// target_channels describe what the decoder reconstructs.
AuxBlock make_aux_block(int module_index, std::int64_t in_channels, std::int64_t out_side,
                        std::int64_t target_side, std::int64_t target_channels, DecoderKind kind,
                        ReconTarget target, AlphaBeta weights, double tau, std::int64_t contrast_dim,
                        bool with_decoder, Rng& rng, DType dt);

// LN over channels, layout change to channel-major, 3x3 conv to
// c_aux = max(C_i/2, 16), GELU.
Tensor aux_reduce(const AuxBlock& aux, const Tensor& grid);

// NT-Xent over ordered same-label pairs with L2 normalization inside.
// Returns exactly 0 when the batch holds no positive pair.
Tensor ntxent_loss(const Tensor& embeddings, const std::vector<int>& labels, double tau);

// Mean BCE of sigmoid(pred) against the target squashed to [0,1]
// (squash_target applies sigmoid; image targets pass through unchanged).
// Probabilities are clamped to [1e-7, 1 - 1e-7].
Tensor recon_loss_bce(const Tensor& pred_logits, const Tensor& target, bool squash_target);

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct LossBreakdown {
    double total = 0.0;
    double recon = 0.0;
    double contrast = 0.0;
    double ce = 0.0;
};

// Combined local loss alpha * L_XX + beta * L_XY. x_i is the module output
// grid [B,h,w,C]; target is the detached reconstruction target (a grid for
// feature mode, a [B,3,H,W] image in [0,1] for image mode).
std::pair<Tensor, LossBreakdown> local_loss(const AuxBlock& aux, const Tensor& x_i, const Tensor& target,
                                            const std::vector<int>& labels);

}  // namespace gradloc
