#include "gradloc/swin.hpp"

#include <algorithm>
#include <cmath>

namespace gradloc {

void SwinConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || embed_dim <= 0 || window <= 0 || num_classes <= 0)
        throw ConfigError("swin config: sizes must be positive");
    if (image_size % patch_size != 0)
        throw ConfigError("swin config: image size " + std::to_string(image_size) +
                          " not divisible by patch size " + std::to_string(patch_size));
    for (int s = 0; s < 4; ++s) {
        if (depths[static_cast<std::size_t>(s)] <= 0 || depths[static_cast<std::size_t>(s)] % 2 != 0)
            throw ConfigError("swin config: stage depths must be positive and even (W-MSA/SW-MSA pairs)");
        const int grid = stage_grid(s);
        if (grid <= 0) throw ConfigError("swin config: token grid vanishes at stage " + std::to_string(s));
        if (grid % effective_window(s) != 0)
            throw ConfigError("swin config: stage " + std::to_string(s) + " grid " + std::to_string(grid) +
                              " not divisible by effective window " + std::to_string(effective_window(s)));
        if (stage_channels(s) % heads[static_cast<std::size_t>(s)] != 0)
            throw ConfigError("swin config: stage " + std::to_string(s) + " heads do not divide channel width");
    }
}

SwinConfig SwinConfig::preset(const std::string& name) {
    SwinConfig c;
    if (name == "swin-micro") {
        c = SwinConfig{};  // defaults are the desk-scale configuration
    } else if (name == "swin-tiny") {
        c.image_size = 224;
        c.patch_size = 4;
        c.embed_dim = 96;
        c.depths = {2, 2, 6, 2};
        c.heads = {3, 6, 12, 24};
        c.window = 7;
    } else if (name == "swin-base") {
        c.image_size = 224;
        c.patch_size = 4;
        c.embed_dim = 128;
        c.depths = {2, 2, 18, 2};
        c.heads = {4, 8, 16, 32};
        c.window = 7;
    } else if (name == "swin-large") {
        c.image_size = 224;
        c.patch_size = 4;
        c.embed_dim = 192;
        c.depths = {2, 2, 18, 2};
        c.heads = {6, 12, 24, 48};
        c.window = 7;
    } else {
        throw ParameterError("unknown model preset: " + name);
    }
    c.validate();
    return c;
}

std::vector<BlockSpec> build_specs(const SwinConfig& cfg) {
    cfg.validate();
    std::vector<BlockSpec> specs;
    specs.reserve(static_cast<std::size_t>(cfg.total_blocks()));
    int index = 0;
    for (int s = 0; s < 4; ++s) {
        const int depth = cfg.depths[static_cast<std::size_t>(s)];
        for (int d = 0; d < depth; ++d, ++index) {
            BlockSpec spec;
            spec.index = index;
            spec.stage = s;
            spec.shifted = (d % 2 == 1);
            spec.has_merge_after = (s < 3 && d == depth - 1);
            specs.push_back(spec);
        }
    }
    return specs;
}

void BlockParams::collect(const std::string& prefix, ParamMap& out) const {
    ln1.collect(prefix + ".ln1", out);
    qkv.collect(prefix + ".qkv", out);
    out.add(prefix + ".rel_bias", rel_bias);
    proj.collect(prefix + ".proj", out);
    ln2.collect(prefix + ".ln2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
}

void MergeParams::collect(const std::string& prefix, ParamMap& out) const {
    norm.collect(prefix + ".norm", out);
    reduce.collect(prefix + ".reduce", out);
}

void EmbedParams::collect(const std::string& prefix, ParamMap& out) const {
    proj.collect(prefix + ".proj", out);
    norm.collect(prefix + ".norm", out);
}

void HeadParams::collect(const std::string& prefix, ParamMap& out) const {
    norm.collect(prefix + ".norm", out);
    fc.collect(prefix + ".fc", out);
}

namespace {

// Flattened lookup map turning the [(2w-1)^2, heads] bias table into a
// [heads, T, T] tensor: out(hd, i, j) = table[rel(i, j) * heads + hd].
std::shared_ptr<const std::vector<std::int64_t>> make_bias_map(int win, int heads) {
    const int t = win * win;
    auto map = std::make_shared<std::vector<std::int64_t>>();
    map->reserve(static_cast<std::size_t>(heads) * t * t);
    for (int hd = 0; hd < heads; ++hd) {
        for (int i = 0; i < t; ++i) {
            for (int j = 0; j < t; ++j) {
                const int dr = i / win - j / win + win - 1;
                const int dc = i % win - j % win + win - 1;
                map->push_back(static_cast<std::int64_t>(dr * (2 * win - 1) + dc) * heads + hd);
            }
        }
    }
    return map;
}

// Additive SW-MSA mask. Tokens of one shifted window may attend only when
// they come from the same pre-shift region; regions follow the three row/col
// bands [0, g-w), [g-w, g-s), [g-s, g) of the shifted frame.
Tensor make_attn_mask(int grid, int win, int shift, DType dtype) {
    std::vector<int> region(static_cast<std::size_t>(grid) * grid);
    auto band = [&](int v) { return v < grid - win ? 0 : (v < grid - shift ? 1 : 2); };
    for (int r = 0; r < grid; ++r)
        for (int c = 0; c < grid; ++c) region[static_cast<std::size_t>(r * grid + c)] = band(r) * 3 + band(c);

    const int nw = (grid / win) * (grid / win);
    const int t = win * win;
    Tensor mask = Tensor::zeros({nw, t, t}, dtype);
    detail::dispatch(dtype, [&](auto tag) {
        using T = decltype(tag);
        auto mv = mask.data<T>();
        for (int wr = 0; wr < grid / win; ++wr) {
            for (int wc = 0; wc < grid / win; ++wc) {
                const int n = wr * (grid / win) + wc;
                for (int i = 0; i < t; ++i) {
                    const int ri = wr * win + i / win, ci = wc * win + i % win;
                    for (int j = 0; j < t; ++j) {
                        const int rj = wr * win + j / win, cj = wc * win + j % win;
                        const bool same = region[static_cast<std::size_t>(ri * grid + ci)] ==
                                          region[static_cast<std::size_t>(rj * grid + cj)];
                        mv[static_cast<std::size_t>((n * t + i) * t + j)] = same ? T(0) : T(-1e9);
                    }
                }
            }
        }
    });
    return mask;
}

}  // namespace

SwinModel build_model(const SwinConfig& cfg, Rng& rng, DType dtype) {
    cfg.validate();
    SwinModel m;
    m.cfg = cfg;
    m.dtype = dtype;
    m.specs = build_specs(cfg);

    const std::int64_t in_features = 3LL * cfg.patch_size * cfg.patch_size;
    m.embed.proj = Linear(in_features, cfg.embed_dim, rng, dtype);
    m.embed.norm = LayerNorm(cfg.embed_dim, dtype);

    m.blocks.reserve(m.specs.size());
    for (const auto& spec : m.specs) {
        const int s = spec.stage;
        const std::int64_t c = cfg.stage_channels(s);
        const int win = cfg.effective_window(s);
        const int hds = cfg.heads[static_cast<std::size_t>(s)];
        BlockParams p;
        p.ln1 = LayerNorm(c, dtype);
        p.qkv = Linear(c, 3 * c, rng, dtype);
        p.rel_bias = zeros_param({(2LL * win - 1) * (2 * win - 1), hds}, dtype);
        p.proj = Linear(c, c, rng, dtype);
        p.ln2 = LayerNorm(c, dtype);
        const auto hidden = static_cast<std::int64_t>(cfg.mlp_ratio * static_cast<double>(c));
        p.fc1 = Linear(c, hidden, rng, dtype);
        p.fc2 = Linear(hidden, c, rng, dtype);
        m.blocks.push_back(std::move(p));
        if (spec.has_merge_after) {
            MergeParams mp;
            mp.norm = LayerNorm(4 * c, dtype);
            mp.reduce = Linear(4 * c, 2 * c, rng, dtype, /*bias=*/false);
            m.merges[static_cast<std::size_t>(s)] = std::move(mp);
        }
    }

    const std::int64_t last_c = cfg.stage_channels(3);
    m.head.norm = LayerNorm(last_c, dtype);
    m.head.fc = Linear(last_c, cfg.num_classes, rng, dtype);

    for (int s = 0; s < 4; ++s) {
        const int win = cfg.effective_window(s);
        m.bias_map[static_cast<std::size_t>(s)] = make_bias_map(win, cfg.heads[static_cast<std::size_t>(s)]);
        const int shift = cfg.shift_size(s);
        if (shift > 0)
            m.attn_mask[static_cast<std::size_t>(s)] = make_attn_mask(cfg.stage_grid(s), win, shift, dtype);
    }
    return m;
}

ParamMap SwinModel::embed_parameters() const {
    ParamMap p;
    embed.collect("embed", p);
    return p;
}

ParamMap SwinModel::block_parameters(int index) const {
    ParamMap p;
    const auto& spec = specs[static_cast<std::size_t>(index)];
    blocks[static_cast<std::size_t>(index)].collect("blocks." + std::to_string(index), p);
    if (spec.has_merge_after)
        merges[static_cast<std::size_t>(spec.stage)].collect("merges." + std::to_string(spec.stage), p);
    return p;
}

ParamMap SwinModel::head_parameters() const {
    ParamMap p;
    head.collect("head", p);
    return p;
}

ParamMap SwinModel::parameters() const {
    ParamMap p;
    embed.collect("embed", p);
    for (const auto& spec : specs) p.merge("", block_parameters(spec.index));
    head.collect("head", p);
    return p;
}

Tensor patch_embed(const SwinModel& m, const Tensor& image) {
    if (image.ndim() != 4 || image.dim(1) != 3 || image.dim(2) != m.cfg.image_size ||
        image.dim(3) != m.cfg.image_size)
        throw ConfigError("patch_embed: expected [B,3," + std::to_string(m.cfg.image_size) + "," +
                          std::to_string(m.cfg.image_size) + "], got " + shape_str(image.shape()));
    Tensor tokens = patchify(image, m.cfg.patch_size);  // [B,h,w,3*p*p]
    return m.embed.norm.forward(m.embed.proj.forward(tokens));
}

Tensor window_msa(const SwinModel& m, const Tensor& normed, const BlockSpec& spec) {
    const int s = spec.stage;
    const auto& p = m.blocks[static_cast<std::size_t>(spec.index)];
    const int win = m.cfg.effective_window(s);
    const int shift = spec.shifted ? m.cfg.shift_size(s) : 0;
    const int heads = m.cfg.heads[static_cast<std::size_t>(s)];
    const std::int64_t b = normed.dim(0), h = normed.dim(1), w = normed.dim(2), c = normed.dim(3);
    const std::int64_t hd = c / heads;
    const std::int64_t t = static_cast<std::int64_t>(win) * win;

    Tensor x = shift > 0 ? roll2d(normed, shift, shift) : normed;
    Tensor wins = window_partition(x, win);  // [N, T, C]
    const std::int64_t n = wins.dim(0);

    Tensor qkv = p.qkv.forward(wins);                        // [N, T, 3C]
    qkv = reshape(qkv, {n, t, 3, heads, hd});
    qkv = permute(qkv, {2, 0, 3, 1, 4});                     // [3, N, heads, T, hd]
    Tensor q = reshape(narrow0(qkv, 0, 1), {n, heads, t, hd});
    Tensor k = reshape(narrow0(qkv, 1, 1), {n, heads, t, hd});
    Tensor v = reshape(narrow0(qkv, 2, 1), {n, heads, t, hd});

    q = affine(q, 1.0 / std::sqrt(static_cast<double>(hd)), 0.0);
    Tensor attn = matmul(q, k, /*transpose_b=*/true);        // [N, heads, T, T]

    Tensor bias = gather_flat(p.rel_bias, m.bias_map[static_cast<std::size_t>(s)], {heads, t, t});
    attn = add(attn, bias);

    if (shift > 0) {
        const Tensor& mask = m.attn_mask[static_cast<std::size_t>(s)];
        const std::int64_t nw = mask.dim(0);
        attn = reshape(attn, {b, nw, heads, t, t});
        attn = add(attn, reshape(mask, {nw, 1, t, t}));
        attn = reshape(attn, {n, heads, t, t});
    }

    attn = softmax(attn, 3);
    Tensor out = matmul(attn, v);                            // [N, heads, T, hd]
    out = reshape(permute(out, {0, 2, 1, 3}), {n, t, c});
    out = p.proj.forward(out);

    Tensor grid = window_reverse(out, win, h, w);
    if (shift > 0) grid = roll2d(grid, -shift, -shift);
    return grid;
}

Tensor block_forward(const SwinModel& m, const Tensor& grid, const BlockSpec& spec) {
    const auto& p = m.blocks[static_cast<std::size_t>(spec.index)];
    if (grid.dim(3) != m.cfg.stage_channels(spec.stage))
        throw ConfigError("block_forward: grid channels do not match stage width");
    Tensor x = add(grid, window_msa(m, p.ln1.forward(grid), spec));
    Tensor y = p.fc2.forward(gelu(p.fc1.forward(p.ln2.forward(x))));
    return add(x, y);
}

Tensor merge_forward(const SwinModel& m, const Tensor& grid, int stage) {
    const auto& p = m.merges[static_cast<std::size_t>(stage)];
    Tensor g = merge_gather(grid);  // [B, h/2, w/2, 4C]
    return p.reduce.forward(p.norm.forward(g));
}

Tensor head_forward(const SwinModel& m, const Tensor& grid) {
    Tensor x = m.head.norm.forward(grid);
    Tensor pooled = mean_axes(x, {1, 2}, false);  // [B, C]
    return m.head.fc.forward(pooled);
}

Tensor forward_blocks(const SwinModel& m, Tensor grid, int first, int last) {
    for (int i = first; i <= last; ++i) {
        const auto& spec = m.specs[static_cast<std::size_t>(i)];
        grid = block_forward(m, grid, spec);
        if (spec.has_merge_after) grid = merge_forward(m, grid, spec.stage);
    }
    return grid;
}

Tensor forward_e2e(const SwinModel& m, const Tensor& image) {
    Tensor grid = patch_embed(m, image);
    grid = forward_blocks(m, std::move(grid), 0, m.cfg.total_blocks() - 1);
    return head_forward(m, grid);
}

}  // namespace gradloc
