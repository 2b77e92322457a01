#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "w2vc/rng.hpp"
#include "w2vc/tensor.hpp"

namespace w2vc {

enum class QuantVariant { gumbel, kmeans };

QuantVariant parse_variant(const std::string& s);
std::string variant_name(QuantVariant v);

struct QuantizerConfig {
    QuantVariant variant = QuantVariant::gumbel;
    int groups = 2;     // parallel codebooks
    int codes = 32;     // entries per codebook
    int code_dim = 32;  // width of one code
    int input_dim = 64; // width of the incoming encoding, split across groups
    double beta = 0.25; // commitment weight
    bool squared_l2 = false;

    void validate() const;
};

// Trainable state: per-group code matrices, plus per-group logit projections
// for the gumbel variant. Every parameter is seeded from its own name so the
// two variants (and any surrounding model parts) never shift each other's
// initial values.
struct Quantizer {
    QuantizerConfig cfg;
    std::vector<TensorPtr> codes;  // groups x [codes x code_dim]
    std::vector<TensorPtr> proj_w; // gumbel only: [input_dim/groups x codes]
    std::vector<TensorPtr> proj_b; // gumbel only: [codes]

    static Quantizer build(ParamRegistry& reg, const QuantizerConfig& cfg, uint64_t seed);
};

// Contiguous feature-axis split; concatenation inverts it exactly.
std::vector<TensorPtr> split(Graph& g, const TensorPtr& z, int groups);

// Nearest code per frame under Euclidean distance, ties toward the lowest
// index. Pure value computation, no graph involvement.
std::vector<int> kmeans_select(const Tensor& z_i, const Tensor& codes_i);

// Two coupled objectives per group: pull codes toward frozen encodings, and
// (weighted by beta) pull encodings toward frozen codes. Each is a mean over
// frames.
struct KmeansLossTerms {
    TensorPtr code_term;   // gradient reaches codes only
    TensorPtr commit_term; // gradient reaches the encoding only (beta applied)
};
KmeansLossTerms kmeans_loss_terms(Graph& g, const TensorPtr& z_i, const TensorPtr& codes_i,
                                  const std::vector<int>& idx, double beta, bool squared_l2);

// Forward emits the selected codes, backward hands the incoming gradient to
// z_i unchanged; codes receive nothing through this path.
TensorPtr straight_through(Graph& g, const TensorPtr& z_i, const TensorPtr& codes_i,
                           const std::vector<int>& idx);

struct GumbelSelection {
    TensorPtr probs;              // [T x codes], rows sum to 1
    std::vector<int> indices;     // argmax per row
    std::vector<double> one_hot;  // T x codes values
};
// Perturbs logits with fresh gumbel noise, temperature-scales, softmaxes.
GumbelSelection gumbel_select(Graph& g, const TensorPtr& logits, double tau, Rng& rng);
// Same with caller-supplied noise (zero noise gives the deterministic limit).
GumbelSelection gumbel_select_with_noise(Graph& g, const TensorPtr& logits, double tau,
                                         const std::vector<double>& noise);

struct QuantizeResult {
    TensorPtr z_hat;                       // [T x groups*code_dim]
    std::vector<std::vector<int>> indices; // groups x T
    std::vector<TensorPtr> probs;          // gumbel: groups x [T x codes]
    std::vector<TensorPtr> mean_probs;     // gumbel: groups x [codes], differentiable;
                                           // frame-averaged noise-free softmax at unit temperature
    TensorPtr codebook_loss;               // kmeans: scalar, mean over frames summed over groups
};
QuantizeResult quantize(Graph& g, const TensorPtr& z, const Quantizer& q, double tau, Rng& rng);

// Pre-draws the noise a gumbel quantize call consumes, in the stream order
// the rest of the system relies on (group-major, row-major within a group).
// The kmeans variant consumes nothing and gets an empty list.
std::vector<std::vector<double>> draw_quantize_noise(int T, const QuantizerConfig& cfg, Rng& rng);

// Same production path with caller-supplied noise (one block per group for
// gumbel, empty for kmeans).
QuantizeResult quantize(Graph& g, const TensorPtr& z, const Quantizer& q, double tau,
                        const std::vector<std::vector<double>>& noise);

// Differentiable surrogate sharing the production backward pass: the gumbel
// path emits soft code mixtures (whose gradients are bit-identical to the
// hard path's), and the kmeans path freezes selections and stop-gradient
// values at their first-call baseline so rebuilt forwards move only along
// the directions the straight-through backward actually tracks. Used by
// finite-difference verification; never by training.
struct QuantFreeze {
    bool captured = false;
    std::vector<std::vector<int>> indices;      // kmeans picks per group
    std::vector<std::vector<double>> z_values;  // per-group encodings at baseline
    std::vector<std::vector<double>> picked;    // per-group selected codes at baseline
};
QuantizeResult quantize_linearized(Graph& g, const TensorPtr& z, const Quantizer& q, double tau,
                                   const std::vector<std::vector<double>>& noise, QuantFreeze& fz);

// Deterministic per-frame selection with no noise: argmax of the logit
// projection (gumbel) or nearest code (kmeans). Used for reporting.
std::vector<std::vector<int>> select_eval_indices(const TensorPtr& z, const Quantizer& q);

// Codebook bootstrap for the kmeans variant: codes start on actual encoder
// outputs so no code is born dead.
void kmeans_init_codes(Quantizer& q, const Tensor& z_batch, Rng& rng);

struct UtilizationReport {
    std::vector<int> per_group_used;
    int64_t joint_used = 0;
    int64_t joint_capacity = 0;
    double joint_percent = 0.0;
};
UtilizationReport utilization(const std::vector<std::vector<int>>& indices_per_group, int codes);

struct CollapseReport {
    double label_mi = 0.0;    // nats, joint code id vs ground-truth class
    double position_mi = 0.0; // nats, joint code id vs frame-position bucket
    double label_entropy = 0.0;
    double position_entropy = 0.0;
    int64_t joint_used = 0;
    bool vad_like = false;         // codebook shrank to a handful of states
    bool temporally_fixed = false; // position explains codes better than content
};
// positions are absolute frame indices; they are bucketed (width 10, capped)
// before the mutual-information estimate.
CollapseReport collapse_probe(const std::vector<std::vector<int>>& indices_per_group, int codes,
                              const std::vector<int>& labels, const std::vector<int>& positions);

} // namespace w2vc
