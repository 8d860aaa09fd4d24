#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "udavt/params.hpp"
#include "udavt/synth.hpp"
#include "udavt/tensor.hpp"

namespace udavt {

struct ModelConfig {
    int frame_size = 16;
    int patch_size = 4;
    int channels = 3;
    int frames = 8;
    int embed_dim = 64;
    int heads = 4;
    int spatial_layers = 2;
    int temporal_layers = 2;
    double mlp_ratio = 2.0;
    int num_classes = 6;
    int projection_dim = 32;

    void validate() const {
        if (frame_size <= 0 || patch_size <= 0 || frame_size % patch_size != 0)
            throw ConfigError("model: frame_size " + std::to_string(frame_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
            throw ConfigError("model: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (channels < 1 || frames < 1 || spatial_layers < 1 || temporal_layers < 1 || num_classes < 2 ||
            projection_dim < 1)
            throw ConfigError("model: non-positive dimension in config");
        if (mlp_ratio <= 0) throw ConfigError("model: mlp_ratio must be positive");
    }

    int grid() const { return frame_size / patch_size; }
    int patches_per_frame() const { return grid() * grid(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int head_dim() const { return embed_dim / heads; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
};

enum class Phase { one = 1, two = 2 };

// Per-sample forward outputs. z is produced only through the fixed head P.
template <class S>
struct VideoFeaturesT {
    TensorT<S> frame_features;  // [T, d]
    TensorT<S> video_feature;   // [1, d]
    TensorT<S> logits;          // [1, K]
    TensorT<S> projection;      // [1, d_p]
};

// Video encoder: spatial transformer over frame patches, temporal
// transformer over frame features, linear classifier, and (from phase 2) a
// frozen random projection head.
template <class S>
class VideoModelT {
  public:
    ModelConfig cfg;
    ParamStoreT<S> params;
    uint64_t init_seed = 0;

    VideoModelT(const ModelConfig& config, uint64_t seed) : cfg(config), init_seed(seed) {
        cfg.validate();
        Rng root(seed);
        add_param("spatial.patch_w", {cfg.patch_dim(), cfg.embed_dim}, Init::trunc_normal, root);
        add_param("spatial.patch_b", {cfg.embed_dim}, Init::zeros, root);
        add_param("spatial.pos", {cfg.patches_per_frame(), cfg.embed_dim}, Init::trunc_normal, root);
        add_param("spatial.cls", {1, cfg.embed_dim}, Init::trunc_normal, root);
        for (int l = 0; l < cfg.spatial_layers; ++l) add_block("spatial.blk" + std::to_string(l), root);
        add_param("spatial.ln_f.g", {cfg.embed_dim}, Init::ones, root);
        add_param("spatial.ln_f.b", {cfg.embed_dim}, Init::zeros, root);

        add_param("temporal.pos", {cfg.frames, cfg.embed_dim}, Init::trunc_normal, root);
        add_param("temporal.cls", {1, cfg.embed_dim}, Init::trunc_normal, root);
        for (int l = 0; l < cfg.temporal_layers; ++l) add_block("temporal.blk" + std::to_string(l), root);
        add_param("temporal.ln_f.g", {cfg.embed_dim}, Init::ones, root);
        add_param("temporal.ln_f.b", {cfg.embed_dim}, Init::zeros, root);

        add_param("classifier.w", {cfg.embed_dim, cfg.num_classes}, Init::trunc_normal, root);
        add_param("classifier.b", {cfg.num_classes}, Init::zeros, root);
    }

    bool has_projection_head() const { return params.has("proj.w1"); }

    // Fixed random non-linear projection, initialized once at phase-2 start
    // and never trained. Gradients still flow through it.
    void init_projection_head(uint64_t seed) {
        if (has_projection_head()) throw PreconditionError("projection head already initialized");
        Rng root(seed);
        add_param("proj.w1", {cfg.embed_dim, cfg.projection_dim}, Init::trunc_normal, root);
        add_param("proj.b1", {cfg.projection_dim}, Init::zeros, root);
        add_param("proj.w2", {cfg.projection_dim, cfg.projection_dim}, Init::trunc_normal, root);
        add_param("proj.b2", {cfg.projection_dim}, Init::zeros, root);
        for (const char* n : {"proj.w1", "proj.b1", "proj.w2", "proj.b2"}) params.set_frozen(n, true);
    }

    // Second classifier head for the two-classifier discrepancy baseline.
    void add_second_classifier(uint64_t seed) {
        if (params.has("classifier2.w")) throw PreconditionError("second classifier already initialized");
        Rng root(seed);
        add_param("classifier2.w", {cfg.embed_dim, cfg.num_classes}, Init::trunc_normal, root);
        add_param("classifier2.b", {cfg.num_classes}, Init::zeros, root);
    }

    // Phase 1: only positional encodings, patch projection, CLS tokens,
    // layer-norm affines and the classifier train. Phase 2: the whole
    // spatial encoder freezes, the temporal encoder and classifier train,
    // P stays frozen.
    std::unordered_map<std::string, bool> build_freeze_mask(Phase phase) const {
        std::unordered_map<std::string, bool> frozen;
        for (const auto& e : params.entries()) {
            const std::string& n = e.name;
            bool f;
            if (n.rfind("proj.", 0) == 0) {
                f = true;
            } else if (phase == Phase::one) {
                bool trainable = n == "spatial.patch_w" || n == "spatial.patch_b" || n == "spatial.pos" ||
                                 n == "spatial.cls" || n == "temporal.pos" || n == "temporal.cls" ||
                                 n.find(".ln1.") != std::string::npos || n.find(".ln2.") != std::string::npos ||
                                 n.find(".ln_f.") != std::string::npos || n.rfind("classifier", 0) == 0;
                f = !trainable;
            } else {
                f = n.rfind("spatial.", 0) == 0;
            }
            frozen[n] = f;
        }
        return frozen;
    }

    void apply_freeze(Phase phase) {
        for (const auto& [name, frozen] : build_freeze_mask(phase)) params.set_frozen(name, frozen);
    }

    // Flattened patch grid of one frame projected to embed_dim, positional
    // encodings added. Frame layout: H x W x C row-major.
    TensorT<S> patchify(const float* frame) const {
        const int ps = cfg.patch_size, g = cfg.grid(), C = cfg.channels, W = cfg.frame_size;
        const int pd = cfg.patch_dim();
        std::vector<S> patches(static_cast<size_t>(cfg.patches_per_frame()) * pd);
        for (int py = 0; py < g; ++py)
            for (int px = 0; px < g; ++px) {
                S* dst = patches.data() + (static_cast<size_t>(py) * g + px) * pd;
                int k = 0;
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        for (int c = 0; c < C; ++c)
                            dst[k++] = static_cast<S>(
                                frame[(static_cast<size_t>(py * ps + dy) * W + (px * ps + dx)) * C + c]);
            }
        auto pm = TensorT<S>::from_data({cfg.patches_per_frame(), pd}, std::move(patches));
        auto tokens = affine(pm, params.at("spatial.patch_w"), params.at("spatial.patch_b"));
        return add(tokens, params.at("spatial.pos"));
    }

    // Each frame processed independently; row t is the final CLS state of
    // frame t. Frames never attend to each other here.
    TensorT<S> spatial_forward(const float* video) const {
        const size_t frame_len = static_cast<size_t>(cfg.frame_size) * cfg.frame_size * cfg.channels;
        std::vector<TensorT<S>> rows;
        rows.reserve(cfg.frames);
        for (int t = 0; t < cfg.frames; ++t) {
            auto x = concat<S>({params.at("spatial.cls"), patchify(video + frame_len * t)}, 0);
            for (int l = 0; l < cfg.spatial_layers; ++l)
                x = block_forward(x, "spatial.blk" + std::to_string(l), nullptr);
            x = layer_norm(x, params.at("spatial.ln_f.g"), params.at("spatial.ln_f.b"));
            rows.push_back(slice(x, 0, 0, 1));
        }
        return concat(rows, 0);
    }

    struct TemporalOut {
        TensorT<S> video_feature;      // [1, d]
        std::vector<double> attention;  // T weights, sum 1
    };

    // CLS-token aggregation over frame features. attention is the last
    // layer's head-averaged CLS-to-frame row, renormalized to sum 1.
    TemporalOut temporal_forward(TensorT<S> frame_features) const {
        if (frame_features.ndim() != 2 || frame_features.dim(0) != cfg.frames ||
            frame_features.dim(1) != cfg.embed_dim)
            throw PreconditionError("temporal_forward: expected [" + std::to_string(cfg.frames) + "," +
                                    std::to_string(cfg.embed_dim) + "], got " +
                                    shape_str(frame_features.shape()));
        auto x = concat<S>({params.at("temporal.cls"), add(frame_features, params.at("temporal.pos"))}, 0);
        std::vector<double> cls_row;
        for (int l = 0; l < cfg.temporal_layers; ++l)
            x = block_forward(x, "temporal.blk" + std::to_string(l),
                              l == cfg.temporal_layers - 1 ? &cls_row : nullptr);
        x = layer_norm(x, params.at("temporal.ln_f.g"), params.at("temporal.ln_f.b"));
        TemporalOut out;
        out.video_feature = slice(x, 0, 0, 1);
        // drop CLS->CLS weight, renormalize over the T frame positions
        out.attention.assign(cls_row.begin() + 1, cls_row.end());
        double total = 0;
        for (double w : out.attention) total += w;
        for (double& w : out.attention) w /= total;
        return out;
    }

    TensorT<S> classify(TensorT<S> f) const { return affine(f, params.at("classifier.w"), params.at("classifier.b")); }

    TensorT<S> classify2(TensorT<S> f) const {
        return affine(f, params.at("classifier2.w"), params.at("classifier2.b"));
    }

    TensorT<S> project(TensorT<S> f) const {
        auto h = gelu(affine(f, params.at("proj.w1"), params.at("proj.b1")));
        return affine(h, params.at("proj.w2"), params.at("proj.b2"));
    }

    struct Encoded {
        TensorT<S> video_feature;
        std::vector<double> attention;
    };

    Encoded encode(const VideoSample& v) const {
        auto ff = spatial_forward(v.frames.data());
        auto t = temporal_forward(ff);
        return {t.video_feature, std::move(t.attention)};
    }

    VideoFeaturesT<S> full_forward(const VideoSample& v) const {
        VideoFeaturesT<S> out;
        out.frame_features = spatial_forward(v.frames.data());
        auto t = temporal_forward(out.frame_features);
        out.video_feature = t.video_feature;
        out.logits = classify(out.video_feature);
        if (has_projection_head()) out.projection = project(out.video_feature);
        return out;
    }

    // y = x*W + b with the bias broadcast over rows through a ones matmul.
    static TensorT<S> affine(TensorT<S> x, TensorT<S> w, TensorT<S> b) {
        auto y = matmul(x, w);
        auto ones = TensorT<S>::ones({x.dim(0), 1});
        return add(y, matmul(ones, reshape(b, {1, b.dim(0)})));
    }

  private:
    enum class Init { trunc_normal, zeros, ones };

    void add_param(const std::string& name, std::vector<int> shape, Init init, const Rng& root) {
        TensorT<S> t;
        switch (init) {
            case Init::trunc_normal:
                t = trunc_normal_tensor<S>(std::move(shape), root.derive("param:" + name), 0.02);
                break;
            case Init::zeros: t = TensorT<S>::zeros(std::move(shape)); break;
            case Init::ones: t = TensorT<S>::ones(std::move(shape)); break;
        }
        params.add(name, std::move(t));
    }

    void add_block(const std::string& p, const Rng& root) {
        const int d = cfg.embed_dim, h = cfg.mlp_hidden();
        add_param(p + ".ln1.g", {d}, Init::ones, root);
        add_param(p + ".ln1.b", {d}, Init::zeros, root);
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            add_param(p + w, {d, d}, Init::trunc_normal, root);
        for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
            add_param(p + b, {d}, Init::zeros, root);
        add_param(p + ".ln2.g", {d}, Init::ones, root);
        add_param(p + ".ln2.b", {d}, Init::zeros, root);
        add_param(p + ".mlp.w1", {d, h}, Init::trunc_normal, root);
        add_param(p + ".mlp.b1", {h}, Init::zeros, root);
        add_param(p + ".mlp.w2", {h, d}, Init::trunc_normal, root);
        add_param(p + ".mlp.b2", {d}, Init::zeros, root);
    }

    // Pre-norm block. When cls_attention is set, it receives the
    // head-averaged softmax row of the CLS query (token 0).
    TensorT<S> block_forward(TensorT<S> x, const std::string& p, std::vector<double>* cls_attention) const {
        const int n = x.dim(0), dh = cfg.head_dim();
        auto h = layer_norm(x, params.at(p + ".ln1.g"), params.at(p + ".ln1.b"));
        auto q = affine(h, params.at(p + ".attn.wq"), params.at(p + ".attn.bq"));
        auto k = affine(h, params.at(p + ".attn.wk"), params.at(p + ".attn.bk"));
        auto v = affine(h, params.at(p + ".attn.wv"), params.at(p + ".attn.bv"));
        if (cls_attention) cls_attention->assign(static_cast<size_t>(n), 0.0);
        std::vector<TensorT<S>> heads;
        heads.reserve(cfg.heads);
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        for (int i = 0; i < cfg.heads; ++i) {
            auto qi = slice(q, 1, i * dh, dh);
            auto ki = slice(k, 1, i * dh, dh);
            auto vi = slice(v, 1, i * dh, dh);
            auto probs = softmax(scalar_mul(matmul(qi, transpose(ki)), scale));
            if (cls_attention)
                for (int j = 0; j < n; ++j)
                    (*cls_attention)[j] += static_cast<double>(probs.data()[j]) / cfg.heads;
            heads.push_back(matmul(probs, vi));
        }
        auto o = affine(concat(heads, 1), params.at(p + ".attn.wo"), params.at(p + ".attn.bo"));
        x = add(x, o);
        auto h2 = layer_norm(x, params.at(p + ".ln2.g"), params.at(p + ".ln2.b"));
        auto m = affine(h2, params.at(p + ".mlp.w1"), params.at(p + ".mlp.b1"));
        m = affine(gelu(m), params.at(p + ".mlp.w2"), params.at(p + ".mlp.b2"));
        return add(x, m);
    }
};

using VideoModel = VideoModelT<double>;
using VideoModelF = VideoModelT<float>;

}  // namespace udavt
