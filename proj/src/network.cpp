#include "w2vc/network.hpp"

#include <cmath>
#include <cstdio>

#include "w2vc/errors.hpp"

namespace w2vc {

QuantizerConfig ModelConfig::quantizer_config() const {
    QuantizerConfig qc;
    qc.variant = variant;
    qc.groups = groups;
    qc.codes = codes;
    qc.code_dim = code_dim;
    qc.input_dim = enc_dim;
    qc.beta = beta;
    qc.squared_l2 = squared_l2;
    return qc;
}

void ModelConfig::validate() const {
    if (feat_dim < 1) throw config_error("feat_dim must be positive");
    if (enc_dim < 1) throw config_error("enc_dim must be positive");
    if (enc_layers < 1) throw config_error("enc_layers must be positive");
    if (ctx_dim < 1) throw config_error("ctx_dim must be positive");
    if (ctx_layers < 1) throw config_error("ctx_layers must be positive");
    if (ff_dim < 1) throw config_error("ff_dim must be positive");
    if (heads < 1 || ctx_dim % heads != 0)
        throw config_error("heads must divide ctx_dim (ctx_dim=" + std::to_string(ctx_dim) +
                           ", heads=" + std::to_string(heads) + ")");
    if (mask_count < 0) throw config_error("mask_count must be non-negative");
    if (!(mask_max_frac > 0.0) || mask_max_frac > 1.0)
        throw config_error("mask_max_frac must be in (0, 1]");
    if (negatives < 1) throw config_error("negatives must be positive");
    if (!(kappa > 0.0)) throw config_error("kappa must be positive");
    if (alpha < 0.0) throw config_error("alpha must be non-negative");
    if (gamma_consistency != 0 && gamma_consistency != 1)
        throw config_error("gamma_consistency must be 0 or 1");
    if (encoder_grad_scale < 0.0) throw config_error("encoder_grad_scale must be non-negative");
    quantizer_config().validate();  // covers group divisibility and code shape rules
}

namespace {

std::string layer_name(const char* stem, int i, const char* leaf) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s.l%d.%s", stem, i, leaf);
    return buf;
}

TensorPtr init_uniform(ParamRegistry& reg, const std::string& name, std::vector<int> shape,
                       double bound, uint64_t seed) {
    TensorPtr p = reg.add(name, std::move(shape));
    Rng r(mix_seed(seed, name));
    for (double& v : p->data) v = r.uniform(-bound, bound);
    return p;
}

TensorPtr init_zero(ParamRegistry& reg, const std::string& name, std::vector<int> shape) {
    return reg.add(name, std::move(shape));
}

TensorPtr init_const(ParamRegistry& reg, const std::string& name, std::vector<int> shape,
                     double value) {
    TensorPtr p = reg.add(name, std::move(shape));
    for (double& v : p->data) v = value;
    return p;
}

// Plain uniform(-1/sqrt(H), 1/sqrt(H)) weights shrink activations roughly 8x
// per stacked layer, leaving the top-layer output too small for anything
// downstream that is not scale invariant. The gain widens the weight range and
// the forget bias starts cell memory half-open, which together keep the output
// magnitude of each layer in the same ballpark as its input.
constexpr double kLstmInitGain = 4.0;
constexpr double kForgetBias = 1.0;

std::vector<LstmLayer> build_lstm_stack(ParamRegistry& reg, const char* stem, int in_dim,
                                        int hidden, int layers, uint64_t seed) {
    std::vector<LstmLayer> out;
    out.reserve(layers);
    const double bound = kLstmInitGain / std::sqrt(static_cast<double>(hidden));
    for (int i = 0; i < layers; ++i) {
        const int in = (i == 0) ? in_dim : hidden;
        LstmLayer L;
        L.wx = init_uniform(reg, layer_name(stem, i, "wx"), {in, 4 * hidden}, bound, seed);
        L.wh = init_uniform(reg, layer_name(stem, i, "wh"), {hidden, 4 * hidden}, bound, seed);
        L.b = init_zero(reg, layer_name(stem, i, "b"), {4 * hidden});
        for (int j = hidden; j < 2 * hidden; ++j) L.b->data[j] = kForgetBias;
        out.push_back(std::move(L));
    }
    return out;
}

}  // namespace

Model Model::build(ParamRegistry& reg, const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    m.encoder = build_lstm_stack(reg, "encoder", cfg.feat_dim, cfg.enc_dim, cfg.enc_layers, seed);

    m.mask_emb = reg.add("mask_emb", {cfg.enc_dim});
    {
        Rng r(mix_seed(seed, "mask_emb"));
        for (double& v : m.mask_emb->data) v = r.normal(0.0, 0.1);
    }

    const double ctx_bound = 1.0 / std::sqrt(static_cast<double>(cfg.ctx_dim));
    m.ctx_in_w = init_uniform(reg, "ctx.in.w", {cfg.enc_dim, cfg.ctx_dim},
                              1.0 / std::sqrt(static_cast<double>(cfg.enc_dim)), seed);
    m.ctx_in_b = init_zero(reg, "ctx.in.b", {cfg.ctx_dim});
    m.context.reserve(cfg.ctx_layers);
    for (int i = 0; i < cfg.ctx_layers; ++i) {
        TransformerLayer t;
        t.ln1_g = init_const(reg, layer_name("ctx", i, "ln1.g"), {cfg.ctx_dim}, 1.0);
        t.ln1_b = init_zero(reg, layer_name("ctx", i, "ln1.b"), {cfg.ctx_dim});
        t.wq = init_uniform(reg, layer_name("ctx", i, "wq"), {cfg.ctx_dim, cfg.ctx_dim}, ctx_bound,
                            seed);
        t.bq = init_zero(reg, layer_name("ctx", i, "bq"), {cfg.ctx_dim});
        t.wk = init_uniform(reg, layer_name("ctx", i, "wk"), {cfg.ctx_dim, cfg.ctx_dim}, ctx_bound,
                            seed);
        t.bk = init_zero(reg, layer_name("ctx", i, "bk"), {cfg.ctx_dim});
        t.wv = init_uniform(reg, layer_name("ctx", i, "wv"), {cfg.ctx_dim, cfg.ctx_dim}, ctx_bound,
                            seed);
        t.bv = init_zero(reg, layer_name("ctx", i, "bv"), {cfg.ctx_dim});
        t.wo = init_uniform(reg, layer_name("ctx", i, "wo"), {cfg.ctx_dim, cfg.ctx_dim}, ctx_bound,
                            seed);
        t.bo = init_zero(reg, layer_name("ctx", i, "bo"), {cfg.ctx_dim});
        t.ln2_g = init_const(reg, layer_name("ctx", i, "ln2.g"), {cfg.ctx_dim}, 1.0);
        t.ln2_b = init_zero(reg, layer_name("ctx", i, "ln2.b"), {cfg.ctx_dim});
        t.w1 = init_uniform(reg, layer_name("ctx", i, "w1"), {cfg.ctx_dim, cfg.ff_dim}, ctx_bound,
                            seed);
        t.b1 = init_zero(reg, layer_name("ctx", i, "b1"), {cfg.ff_dim});
        t.w2 = init_uniform(reg, layer_name("ctx", i, "w2"), {cfg.ff_dim, cfg.ctx_dim},
                            1.0 / std::sqrt(static_cast<double>(cfg.ff_dim)), seed);
        t.b2 = init_zero(reg, layer_name("ctx", i, "b2"), {cfg.ctx_dim});
        m.context.push_back(std::move(t));
    }

    m.cmp_w = init_uniform(reg, "cmp.w", {cfg.ctx_dim, cfg.groups * cfg.code_dim}, ctx_bound, seed);
    m.cmp_b = init_zero(reg, "cmp.b", {cfg.groups * cfg.code_dim});

    m.quantizer = Quantizer::build(reg, cfg.quantizer_config(), seed);

    m.has_consistency = cfg.gamma_consistency == 1 || cfg.register_consistency_unused;
    if (m.has_consistency) {
        m.consistency = build_lstm_stack(reg, "consistency", cfg.groups * cfg.code_dim,
                                         cfg.enc_dim, cfg.enc_layers, seed);
        m.cons_out_w = init_uniform(reg, "consistency.out.w", {cfg.enc_dim, cfg.feat_dim},
                                    1.0 / std::sqrt(static_cast<double>(cfg.enc_dim)), seed);
        m.cons_out_b = init_zero(reg, "consistency.out.b", {cfg.feat_dim});
    }
    return m;
}

TensorPtr lstm_forward(Graph& g, const TensorPtr& x, const std::vector<LstmLayer>& layers,
                       int hidden) {
    if (layers.empty()) throw usage_error("lstm_forward needs at least one layer");
    TensorPtr cur = x;
    for (const auto& L : layers) {
        if (cur->cols() != L.wx->rows())
            throw shape_error("lstm layer expects input width " + std::to_string(L.wx->rows()) +
                              ", got " + std::to_string(cur->cols()));
        TensorPtr xp = g.add_rowvec(g.matmul(cur, L.wx), L.b);  // [T x 4H]
        cur = g.lstm_cell_sequence(xp, L.wh, hidden);
    }
    return cur;
}

TensorPtr encoder_forward(Graph& g, const Model& m, const TensorPtr& x) {
    if (x->cols() != m.cfg.feat_dim)
        throw shape_error("encoder expects " + std::to_string(m.cfg.feat_dim) +
                          " features per frame, got " + std::to_string(x->cols()));
    TensorPtr z = lstm_forward(g, x, m.encoder, m.cfg.enc_dim);
    return g.gradient_scale(z, m.cfg.encoder_grad_scale);
}

MaskSpec sample_masks(int T, const ModelConfig& cfg, Rng& rng) {
    if (T < 1) throw usage_error("sample_masks needs T >= 1");
    MaskSpec spec;
    spec.spans.reserve(cfg.mask_count);
    const int max_w =
        std::max(1, static_cast<int>(std::floor(cfg.mask_max_frac * static_cast<double>(T))));
    std::vector<char> hit(static_cast<size_t>(T), 0);
    for (int i = 0; i < cfg.mask_count; ++i) {
        const int start = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
        int width = 1 + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(max_w)));
        if (start + width > T) width = T - start;
        spec.spans.emplace_back(start, width);
        for (int t = start; t < start + width; ++t) hit[static_cast<size_t>(t)] = 1;
    }
    for (int t = 0; t < T; ++t)
        if (hit[static_cast<size_t>(t)]) spec.masked.push_back(t);
    return spec;
}

TensorPtr apply_masks(Graph& g, const TensorPtr& z, const MaskSpec& spec, const TensorPtr& emb) {
    return g.mask_rows(z, spec.masked, emb);
}

std::vector<double> sinusoidal_pe(int T, int D) {
    if (T < 1) throw usage_error("sinusoidal_pe needs T >= 1");
    if (D < 2 || D % 2 != 0)
        throw config_error("position encoding needs an even dimension, got " + std::to_string(D));
    std::vector<double> pe(static_cast<size_t>(T) * D);
    for (int t = 0; t < T; ++t)
        for (int i = 0; i < D / 2; ++i) {
            const double rate = std::pow(10000.0, static_cast<double>(2 * i) / D);
            const double arg = static_cast<double>(t) / rate;
            pe[static_cast<size_t>(t) * D + 2 * i] = std::sin(arg);
            pe[static_cast<size_t>(t) * D + 2 * i + 1] = std::cos(arg);
        }
    return pe;
}

namespace {

TensorPtr attention(Graph& g, const TransformerLayer& L, const TensorPtr& x, int heads,
                    std::vector<TensorPtr>* attn_out) {
    const int D = x->cols();
    const int dh = D / heads;
    TensorPtr q = g.add_rowvec(g.matmul(x, L.wq), L.bq);
    TensorPtr k = g.add_rowvec(g.matmul(x, L.wk), L.bk);
    TensorPtr v = g.add_rowvec(g.matmul(x, L.wv), L.bv);
    std::vector<TensorPtr> head_outs;
    head_outs.reserve(heads);
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int h = 0; h < heads; ++h) {
        TensorPtr qh = g.slice_cols(q, h * dh, dh);
        TensorPtr kh = g.slice_cols(k, h * dh, dh);
        TensorPtr vh = g.slice_cols(v, h * dh, dh);
        TensorPtr scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
        TensorPtr attn = g.softmax_rows(scores);
        if (attn_out) attn_out->push_back(attn);
        head_outs.push_back(g.matmul(attn, vh));
    }
    TensorPtr merged = g.concat_cols(head_outs);
    return g.add_rowvec(g.matmul(merged, L.wo), L.bo);
}

}  // namespace

TensorPtr context_forward(Graph& g, const Model& m, const TensorPtr& z_masked, bool use_pe,
                          std::vector<TensorPtr>* attn_out) {
    if (z_masked->cols() != m.cfg.enc_dim)
        throw shape_error("context network expects width " + std::to_string(m.cfg.enc_dim) +
                          ", got " + std::to_string(z_masked->cols()));
    const int T = z_masked->rows();
    TensorPtr x = g.add_rowvec(g.matmul(z_masked, m.ctx_in_w), m.ctx_in_b);
    if (use_pe) x = g.add(x, g.constant({T, m.cfg.ctx_dim}, sinusoidal_pe(T, m.cfg.ctx_dim)));
    for (const auto& L : m.context) {
        TensorPtr a = g.layer_norm(x, L.ln1_g, L.ln1_b);
        x = g.add(x, attention(g, L, a, m.cfg.heads, attn_out));
        TensorPtr f = g.layer_norm(x, L.ln2_g, L.ln2_b);
        f = g.gelu(g.add_rowvec(g.matmul(f, L.w1), L.b1));
        x = g.add(x, g.add_rowvec(g.matmul(f, L.w2), L.b2));
    }
    return x;
}

TensorPtr compare_project(Graph& g, const Model& m, const TensorPtr& c) {
    if (c->cols() != m.cfg.ctx_dim)
        throw shape_error("compare projection expects width " + std::to_string(m.cfg.ctx_dim) +
                          ", got " + std::to_string(c->cols()));
    return g.add_rowvec(g.matmul(c, m.cmp_w), m.cmp_b);
}

TensorPtr consistency_forward(Graph& g, const Model& m, const TensorPtr& z_hat) {
    if (!m.has_consistency)
        throw usage_error("consistency network was not built for this model");
    if (z_hat->cols() != m.cfg.groups * m.cfg.code_dim)
        throw shape_error("consistency network expects width " +
                          std::to_string(m.cfg.groups * m.cfg.code_dim) + ", got " +
                          std::to_string(z_hat->cols()));
    TensorPtr r = lstm_forward(g, z_hat, m.consistency, m.cfg.enc_dim);
    return g.add_rowvec(g.matmul(r, m.cons_out_w), m.cons_out_b);
}

}  // namespace w2vc
