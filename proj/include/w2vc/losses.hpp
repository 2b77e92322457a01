#pragma once

#include <vector>

#include "w2vc/rng.hpp"
#include "w2vc/tensor.hpp"

namespace w2vc {

// Cosine similarity of two equal-length vectors; the denominator is floored
// at 1e-8 so zero vectors give 0 instead of a division blow-up.
double cosine_value(const std::vector<double>& a, const std::vector<double>& b);

struct NegativeSet {
    std::vector<int> anchors;                 // anchors that kept at least one distractor
    std::vector<std::vector<int>> negatives;  // parallel to anchors
    int skipped = 0;                          // anchors dropped for lack of candidates
};

// Draws up to n_negatives distractor frames per anchor, uniformly without
// replacement from the other frames of the utterance. When fewer than
// n_negatives candidates exist every other frame is used (in index order,
// consuming no randomness). Anchors with no candidates at all (T == 1) are
// dropped with a warning on stderr.
NegativeSet sample_negatives(int T, const std::vector<int>& anchors, int n_negatives, Rng& rng);

struct ContrastiveResult {
    TensorPtr loss;
    int zero_norm_pairs = 0;  // candidate pairs whose norm product hit the floor
};

// Softmax contrast of each anchor's context vector against its own quantized
// encoding (positive) and the sampled distractors, using cosine similarity
// at temperature kappa. The loss is averaged over anchors; with no anchors
// it is the constant 0.
ContrastiveResult contrastive_loss(Graph& g, const TensorPtr& cp, const TensorPtr& z_hat,
                                   const NegativeSet& negs, double kappa);

// Pushes the per-group code usage towards uniform: (GV - sum of per-group
// perplexities) / GV. Each entry of mean_probs is a length-`codes`
// distribution and must sum to 1 within 1e-6.
TensorPtr diversity_loss(Graph& g, const std::vector<TensorPtr>& mean_probs, int codes);

// Mean over frames of the Euclidean distance between target and
// reconstruction rows.
TensorPtr consistency_loss(Graph& g, const TensorPtr& target, const TensorPtr& recon);

struct LossBreakdown {
    TensorPtr total;
    TensorPtr contrast;
    TensorPtr codebook;
    TensorPtr consistency;  // null when gamma == 0 and none was supplied
};

// Combines the terms: codebook = alpha * codebook_raw when apply_alpha is
// set (the gumbel diversity term), otherwise codebook_raw as-is (the kmeans
// term); total = contrast + codebook, plus consistency when gamma == 1.
// The gamma == 0 total is bit-identical to the same sum without the
// consistency term ever entering the graph.
LossBreakdown total_loss(Graph& g, const TensorPtr& contrast, const TensorPtr& codebook_raw,
                         bool apply_alpha, double alpha, const TensorPtr& consistency, int gamma);

}  // namespace w2vc
