#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "w2vc/quantizer.hpp"
#include "w2vc/rng.hpp"
#include "w2vc/tensor.hpp"

namespace w2vc {

// Model hyperparameters. Defaults are the desk-scale configuration; the
// full-scale values are selected by the CLI's --dims switch.
struct ModelConfig {
    int feat_dim = 64;       // input feature dimension per frame
    int enc_dim = 64;        // feature encoder output width
    int enc_layers = 3;      // recurrent layers in the feature encoder
    int ctx_dim = 96;        // context network width
    int ctx_layers = 5;      // transformer blocks in the context network
    int ff_dim = 384;        // transformer feed-forward inner width
    int heads = 4;           // attention heads
    QuantVariant variant = QuantVariant::gumbel;
    int groups = 2;          // codebook groups
    int codes = 32;          // codewords per group
    int code_dim = 32;       // codeword width per group
    int mask_count = 5;      // masks sampled per utterance
    double mask_max_frac = 0.16;  // max mask width as a fraction of T
    int negatives = 50;           // distractors per anchor
    double kappa = 0.1;           // contrastive temperature
    double alpha = 1.5;           // diversity loss weight (gumbel variant)
    double beta = 0.25;           // commitment weight (kmeans variant)
    int gamma_consistency = 0;    // 0 or 1: weight of the consistency loss
    double encoder_grad_scale = 0.1;  // gradient scale at the encoder output
    bool anchor_all_frames = false;   // contrast every frame, not just masked
    bool squared_l2 = false;          // squared distances in the kmeans loss
    // Debug switch: register the consistency parameters even when
    // gamma_consistency is 0 so their presence can be shown inert.
    bool register_consistency_unused = false;

    QuantizerConfig quantizer_config() const;
    void validate() const;
};

// One recurrent layer. Gate order in the packed weight columns is
// input, forget, cell, output.
struct LstmLayer {
    TensorPtr wx;  // [in x 4H]
    TensorPtr wh;  // [H x 4H]
    TensorPtr b;   // [4H]
};

struct TransformerLayer {
    TensorPtr ln1_g, ln1_b;
    TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
    TensorPtr ln2_g, ln2_b;
    TensorPtr w1, b1, w2, b2;
};

struct Model {
    ModelConfig cfg;
    std::vector<LstmLayer> encoder;
    TensorPtr mask_emb;           // [enc_dim]
    TensorPtr ctx_in_w, ctx_in_b; // enc_dim -> ctx_dim
    std::vector<TransformerLayer> context;
    TensorPtr cmp_w, cmp_b;       // ctx_dim -> groups*code_dim
    Quantizer quantizer;
    bool has_consistency = false;
    std::vector<LstmLayer> consistency;
    TensorPtr cons_out_w, cons_out_b;  // enc_dim -> feat_dim

    // Every parameter is initialized from an RNG keyed by (seed, its own
    // name), so adding or removing one subnetwork never shifts another's
    // initial values.
    static Model build(ParamRegistry& reg, const ModelConfig& cfg, uint64_t seed);
};

// Runs a stack of recurrent layers over x [T x in] with zero initial state
// and returns the top layer's hidden sequence [T x H].
TensorPtr lstm_forward(Graph& g, const TensorPtr& x, const std::vector<LstmLayer>& layers,
                       int hidden);

// Feature encoder: recurrent stack plus the gradient scale applied at its
// output boundary.
TensorPtr encoder_forward(Graph& g, const Model& m, const TensorPtr& x);

struct MaskSpec {
    std::vector<std::pair<int, int>> spans;  // (start, width) as sampled, clipped to T
    std::vector<int> masked;                 // sorted unique masked frame indices
};

// Samples mask_count spans: start uniform over [0, T-1], width uniform over
// [1, max(1, floor(mask_max_frac * T))], clipped at the sequence end.
// Spans may overlap; masked is their union.
MaskSpec sample_masks(int T, const ModelConfig& cfg, Rng& rng);

// Replaces the masked rows of z with the learned mask embedding.
TensorPtr apply_masks(Graph& g, const TensorPtr& z, const MaskSpec& spec, const TensorPtr& emb);

// Fixed sinusoidal position values, [T x D]. D must be even. Row 0 is
// [0, 1, 0, 1, ...]; column 2i holds sin(t / 10000^(2i/D)), column 2i+1 the
// matching cos.
std::vector<double> sinusoidal_pe(int T, int D);

// Context network: input projection, additive position values, then
// pre-norm transformer blocks. use_pe=false drops the position term (used by
// the permutation-equivariance check). When attn_out is non-null the
// per-layer attention row-distributions are appended to it (layer-major,
// heads within a layer in order).
TensorPtr context_forward(Graph& g, const Model& m, const TensorPtr& z_masked, bool use_pe = true,
                          std::vector<TensorPtr>* attn_out = nullptr);

// Projects context vectors into the comparison space shared with the
// quantized encodings: ctx_dim -> groups*code_dim.
TensorPtr compare_project(Graph& g, const Model& m, const TensorPtr& c);

// Consistency network: recurrent stack over the quantized encodings followed
// by a linear map back to feature space, [T x feat_dim].
TensorPtr consistency_forward(Graph& g, const Model& m, const TensorPtr& z_hat);

}  // namespace w2vc
