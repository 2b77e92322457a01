#include "w2vc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "w2vc/errors.hpp"

namespace w2vc {

double cosine_value(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw shape_error("cosine_value: length mismatch (" + std::to_string(a.size()) + " vs " +
                          std::to_string(b.size()) + ")");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
}

NegativeSet sample_negatives(int T, const std::vector<int>& anchors, int n_negatives, Rng& rng) {
    if (T < 1) throw usage_error("sample_negatives needs T >= 1");
    if (n_negatives < 1) throw config_error("n_negatives must be positive");
    NegativeSet out;
    for (int t : anchors) {
        if (t < 0 || t >= T)
            throw usage_error("sample_negatives: anchor " + std::to_string(t) + " outside [0, " +
                              std::to_string(T) + ")");
        if (T - 1 == 0) {
            ++out.skipped;
            continue;
        }
        std::vector<int> cand;
        cand.reserve(static_cast<size_t>(T) - 1);
        for (int i = 0; i < T; ++i)
            if (i != t) cand.push_back(i);
        if (static_cast<int>(cand.size()) <= n_negatives) {
            out.anchors.push_back(t);
            out.negatives.push_back(std::move(cand));
            continue;
        }
        // partial Fisher-Yates: the first n_negatives slots become the sample
        for (int k = 0; k < n_negatives; ++k) {
            const size_t j =
                static_cast<size_t>(k) + rng.uniform_int(static_cast<uint64_t>(cand.size() - k));
            std::swap(cand[static_cast<size_t>(k)], cand[j]);
        }
        cand.resize(static_cast<size_t>(n_negatives));
        out.anchors.push_back(t);
        out.negatives.push_back(std::move(cand));
    }
    if (out.skipped > 0)
        std::cerr << "warning: " << out.skipped
                  << " anchor(s) skipped: single-frame utterance has no distractors\n";
    return out;
}

ContrastiveResult contrastive_loss(Graph& g, const TensorPtr& cp, const TensorPtr& z_hat,
                                   const NegativeSet& negs, double kappa) {
    if (!(kappa > 0.0)) throw config_error("contrastive temperature must be positive");
    if (cp->rank() != 2 || z_hat->rank() != 2 || cp->shape != z_hat->shape)
        throw shape_error("contrastive_loss: context and quantized encodings must share shape");
    if (negs.anchors.size() != negs.negatives.size())
        throw usage_error("contrastive_loss: anchors and negatives are not parallel");
    ContrastiveResult res;
    const int A = static_cast<int>(negs.anchors.size());
    if (A == 0) {
        res.loss = g.constant({1}, {0.0});
        return res;
    }
    const int T = cp->rows();
    const size_t n = negs.negatives[0].size();
    if (n == 0) throw usage_error("contrastive_loss: anchor without distractors");
    std::vector<int> c_idx, z_idx;
    c_idx.reserve(static_cast<size_t>(A) * (n + 1));
    z_idx.reserve(static_cast<size_t>(A) * (n + 1));
    for (int i = 0; i < A; ++i) {
        const int t = negs.anchors[i];
        if (t < 0 || t >= T)
            throw usage_error("contrastive_loss: anchor " + std::to_string(t) + " out of range");
        if (negs.negatives[static_cast<size_t>(i)].size() != n)
            throw usage_error("contrastive_loss: ragged negative counts across anchors");
        c_idx.push_back(t);
        z_idx.push_back(t);  // the positive
        for (int j : negs.negatives[static_cast<size_t>(i)]) {
            if (j < 0 || j >= T || j == t)
                throw usage_error("contrastive_loss: bad distractor index " + std::to_string(j));
            c_idx.push_back(t);
            z_idx.push_back(j);
        }
    }
    const int m = static_cast<int>(n) + 1;  // candidates per anchor
    TensorPtr rc = g.gather_rows(cp, c_idx);
    TensorPtr gz = g.gather_rows(z_hat, z_idx);
    TensorPtr dots = g.row_sum(g.mul(rc, gz));
    TensorPtr prod = g.mul(g.norm2_rows(rc), g.norm2_rows(gz));
    for (double v : prod->data)
        if (v < 1e-8) ++res.zero_norm_pairs;
    TensorPtr sim = g.div(dots, g.clamp_min(prod, 1e-8));
    TensorPtr scores = g.reshape(g.scale(sim, 1.0 / kappa), {A, m});
    TensorPtr per_anchor = g.sub(g.logsumexp_rows(scores), g.pick_col(scores, 0));
    res.loss = g.scale(g.sum_all(per_anchor), 1.0 / A);
    return res;
}

TensorPtr diversity_loss(Graph& g, const std::vector<TensorPtr>& mean_probs, int codes) {
    if (mean_probs.empty()) throw usage_error("diversity_loss: no probability vectors");
    const int G = static_cast<int>(mean_probs.size());
    TensorPtr perp_sum;
    for (const auto& p : mean_probs) {
        if (p->size() != codes)
            throw shape_error("diversity_loss: expected length-" + std::to_string(codes) +
                              " distribution, got " + std::to_string(p->size()));
        const double s = std::accumulate(p->data.begin(), p->data.end(), 0.0);
        if (std::abs(s - 1.0) > 1e-6)
            throw usage_error("diversity_loss: probabilities sum to " + std::to_string(s) +
                              ", expected 1");
        TensorPtr entropy = g.scale(g.sum_all(g.xlogx(p)), -1.0);
        TensorPtr perp = g.exp(entropy);
        perp_sum = perp_sum ? g.add(perp_sum, perp) : perp;
    }
    const double gv = static_cast<double>(G) * codes;
    return g.scale(g.sub(g.constant({1}, {gv}), perp_sum), 1.0 / gv);
}

TensorPtr consistency_loss(Graph& g, const TensorPtr& target, const TensorPtr& recon) {
    if (target->rank() != 2 || recon->rank() != 2 || target->shape != recon->shape)
        throw shape_error("consistency_loss: target and reconstruction must share shape");
    const int T = target->rows();
    return g.scale(g.sum_all(g.norm2_rows(g.sub(target, recon))), 1.0 / T);
}

LossBreakdown total_loss(Graph& g, const TensorPtr& contrast, const TensorPtr& codebook_raw,
                         bool apply_alpha, double alpha, const TensorPtr& consistency, int gamma) {
    if (!contrast || !codebook_raw) throw usage_error("total_loss: missing a required term");
    if (gamma != 0 && gamma != 1) throw config_error("gamma must be 0 or 1");
    LossBreakdown out;
    out.contrast = contrast;
    out.codebook = apply_alpha ? g.scale(codebook_raw, alpha) : codebook_raw;
    out.total = g.add(contrast, out.codebook);
    if (gamma == 1) {
        if (!consistency) throw usage_error("total_loss: gamma is 1 but no consistency term");
        out.consistency = consistency;
        out.total = g.add(out.total, consistency);
    } else {
        out.consistency = consistency;  // may be null; never enters the sum
    }
    return out;
}

}  // namespace w2vc
