#include "w2vc/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_set>

namespace w2vc {

QuantVariant parse_variant(const std::string& s) {
    if (s == "gumbel") return QuantVariant::gumbel;
    if (s == "kmeans") return QuantVariant::kmeans;
    throw config_error("unknown quantizer variant '" + s + "' (expected gumbel or kmeans)");
}

std::string variant_name(QuantVariant v) {
    return v == QuantVariant::gumbel ? "gumbel" : "kmeans";
}

void QuantizerConfig::validate() const {
    if (groups < 1 || codes < 2 || code_dim < 1 || input_dim < 1)
        throw config_error("quantizer: groups/codes/code_dim/input_dim out of range");
    if (input_dim % groups != 0)
        throw config_error("quantizer: input_dim " + std::to_string(input_dim) +
                           " not divisible by groups " + std::to_string(groups));
    if (variant == QuantVariant::kmeans && input_dim / groups != code_dim)
        throw config_error("quantizer: kmeans needs input_dim/groups == code_dim (" +
                           std::to_string(input_dim / groups) +
                           " != " + std::to_string(code_dim) + ")");
    if (beta < 0) throw config_error("quantizer: beta must be >= 0");
}

Quantizer Quantizer::build(ParamRegistry& reg, const QuantizerConfig& cfg, uint64_t seed) {
    cfg.validate();
    Quantizer q;
    q.cfg = cfg;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.code_dim));
    const int split_dim = cfg.input_dim / cfg.groups;
    for (int g = 0; g < cfg.groups; ++g) {
        auto c = reg.add("quantizer.codes." + std::to_string(g), {cfg.codes, cfg.code_dim});
        Rng rng(mix_seed(seed, c->name));
        for (auto& v : c->data) v = rng.uniform(-bound, bound);
        q.codes.push_back(c);
    }
    if (cfg.variant == QuantVariant::gumbel) {
        for (int g = 0; g < cfg.groups; ++g) {
            auto w = reg.add("quantizer.proj_w." + std::to_string(g), {split_dim, cfg.codes});
            Rng rng(mix_seed(seed, w->name));
            // Unit-variance normal entries make step-0 logits large relative
            // to the sampling noise, so selections act as a content hash from
            // the start instead of coin flips. With small fan-in style
            // weights the picks stay noise dominated and the contrastive
            // objective has no stable targets to learn from.
            for (auto& v : w->data) v = rng.normal();
            q.proj_w.push_back(w);
            q.proj_b.push_back(reg.add("quantizer.proj_b." + std::to_string(g), {cfg.codes}));
        }
    }
    return q;
}

std::vector<TensorPtr> split(Graph& g, const TensorPtr& z, int groups) {
    if (z->cols() % groups != 0)
        throw config_error("split: width " + std::to_string(z->cols()) +
                           " not divisible by groups " + std::to_string(groups));
    const int w = z->cols() / groups;
    std::vector<TensorPtr> out;
    for (int i = 0; i < groups; ++i) out.push_back(g.slice_cols(z, i * w, w));
    return out;
}

std::vector<int> kmeans_select(const Tensor& z_i, const Tensor& codes_i) {
    const int T = z_i.rows(), K = z_i.cols(), V = codes_i.rows();
    if (codes_i.cols() != K) throw shape_error("kmeans_select: code width does not match input");
    std::vector<int> idx(T);
    for (int t = 0; t < T; ++t) {
        const double* row = z_i.data.data() + static_cast<size_t>(t) * K;
        double best = 0;
        int arg = -1;
        for (int v = 0; v < V; ++v) {
            const double* code = codes_i.data.data() + static_cast<size_t>(v) * K;
            double d = 0;
            for (int k = 0; k < K; ++k) {
                const double diff = row[k] - code[k];
                d += diff * diff;
            }
            if (arg < 0 || d < best) { // strict <: ties keep the lowest index
                best = d;
                arg = v;
            }
        }
        idx[t] = arg;
    }
    return idx;
}

namespace {

// mean over frames of the per-row distance between a and b
TensorPtr mean_row_distance(Graph& g, const TensorPtr& a, const TensorPtr& b, bool squared_l2) {
    auto diff = g.sub(a, b);
    TensorPtr per_row = squared_l2 ? g.row_sum(g.mul(diff, diff)) : g.norm2_rows(diff);
    return g.scale(g.sum_all(per_row), 1.0 / a->rows());
}

} // namespace

KmeansLossTerms kmeans_loss_terms(Graph& g, const TensorPtr& z_i, const TensorPtr& codes_i,
                                  const std::vector<int>& idx, double beta, bool squared_l2) {
    auto picked = g.gather_rows(codes_i, idx);
    KmeansLossTerms out;
    out.code_term = mean_row_distance(g, g.detach(z_i), picked, squared_l2);
    out.commit_term =
        g.scale(mean_row_distance(g, z_i, g.detach(picked), squared_l2), beta);
    return out;
}

TensorPtr straight_through(Graph& g, const TensorPtr& z_i, const TensorPtr& codes_i,
                           const std::vector<int>& idx) {
    const int T = z_i->rows(), K = codes_i->cols();
    if (z_i->cols() != K) throw shape_error("straight_through: widths differ");
    std::vector<double> forward(static_cast<size_t>(T) * K);
    for (int t = 0; t < T; ++t)
        std::copy_n(codes_i->data.data() + static_cast<size_t>(idx[t]) * K, K,
                    forward.data() + static_cast<size_t>(t) * K);
    return g.st_copy(z_i, forward);
}

GumbelSelection gumbel_select_with_noise(Graph& g, const TensorPtr& logits, double tau,
                                         const std::vector<double>& noise) {
    if (tau <= 0) throw config_error("gumbel temperature must be positive");
    if (noise.size() != logits->data.size())
        throw shape_error("gumbel noise size does not match logits");
    const int T = logits->rows(), V = logits->cols();
    auto noisy = g.add(logits, g.constant({T, V}, noise));
    GumbelSelection sel;
    sel.probs = g.softmax_rows(g.scale(noisy, 1.0 / tau));
    sel.indices.resize(T);
    sel.one_hot.assign(static_cast<size_t>(T) * V, 0.0);
    for (int t = 0; t < T; ++t) {
        const double* row = sel.probs->data.data() + static_cast<size_t>(t) * V;
        int arg = 0;
        for (int v = 1; v < V; ++v)
            if (row[v] > row[arg]) arg = v;
        sel.indices[t] = arg;
        sel.one_hot[static_cast<size_t>(t) * V + arg] = 1.0;
    }
    return sel;
}

GumbelSelection gumbel_select(Graph& g, const TensorPtr& logits, double tau, Rng& rng) {
    std::vector<double> noise(logits->data.size());
    for (auto& v : noise) v = rng.gumbel();
    return gumbel_select_with_noise(g, logits, tau, noise);
}

std::vector<std::vector<double>> draw_quantize_noise(int T, const QuantizerConfig& cfg, Rng& rng) {
    std::vector<std::vector<double>> noise;
    if (cfg.variant != QuantVariant::gumbel) return noise;
    noise.resize(static_cast<size_t>(cfg.groups));
    for (auto& block : noise) {
        block.resize(static_cast<size_t>(T) * cfg.codes);
        for (double& v : block) v = rng.gumbel();
    }
    return noise;
}

QuantizeResult quantize(Graph& g, const TensorPtr& z, const Quantizer& q, double tau,
                        const std::vector<std::vector<double>>& noise) {
    const auto& cfg = q.cfg;
    if (z->cols() != cfg.input_dim)
        throw shape_error("quantize: input width " + std::to_string(z->cols()) +
                          " does not match configured " + std::to_string(cfg.input_dim));
    if (cfg.variant == QuantVariant::gumbel &&
        static_cast<int>(noise.size()) != cfg.groups)
        throw usage_error("quantize: expected one noise block per group");
    auto parts = split(g, z, cfg.groups);
    QuantizeResult out;
    std::vector<TensorPtr> pieces;
    for (int i = 0; i < cfg.groups; ++i) {
        if (cfg.variant == QuantVariant::gumbel) {
            auto logits = g.add_rowvec(g.matmul(parts[i], q.proj_w[i]), q.proj_b[i]);
            auto sel = gumbel_select_with_noise(g, logits, tau, noise[static_cast<size_t>(i)]);
            pieces.push_back(g.st_matmul(sel.probs, q.codes[i], sel.indices));
            out.indices.push_back(sel.indices);
            // Diversity statistics come from the noise-free unit-temperature
            // softmax, so the anneal schedule and the sampling noise cannot
            // flatten them; only the selection path sees the perturbed probs.
            out.mean_probs.push_back(g.col_mean(g.softmax_rows(logits)));
            out.probs.push_back(std::move(sel.probs));
        } else {
            auto idx = kmeans_select(*parts[i], *q.codes[i]);
            auto terms = kmeans_loss_terms(g, parts[i], q.codes[i], idx, cfg.beta, cfg.squared_l2);
            auto group_loss = g.add(terms.code_term, terms.commit_term);
            out.codebook_loss =
                out.codebook_loss ? g.add(out.codebook_loss, group_loss) : group_loss;
            pieces.push_back(straight_through(g, parts[i], q.codes[i], idx));
            out.indices.push_back(std::move(idx));
        }
    }
    out.z_hat = g.concat_cols(pieces);
    return out;
}

QuantizeResult quantize(Graph& g, const TensorPtr& z, const Quantizer& q, double tau, Rng& rng) {
    return quantize(g, z, q, tau, draw_quantize_noise(z->rows(), q.cfg, rng));
}

QuantizeResult quantize_linearized(Graph& g, const TensorPtr& z, const Quantizer& q, double tau,
                                   const std::vector<std::vector<double>>& noise,
                                   QuantFreeze& fz) {
    const auto& cfg = q.cfg;
    if (z->cols() != cfg.input_dim)
        throw shape_error("quantize_linearized: input width " + std::to_string(z->cols()) +
                          " does not match configured " + std::to_string(cfg.input_dim));
    auto parts = split(g, z, cfg.groups);
    QuantizeResult out;
    std::vector<TensorPtr> pieces;
    for (int i = 0; i < cfg.groups; ++i) {
        const size_t gi = static_cast<size_t>(i);
        if (cfg.variant == QuantVariant::gumbel) {
            auto logits = g.add_rowvec(g.matmul(parts[i], q.proj_w[i]), q.proj_b[i]);
            auto sel = gumbel_select_with_noise(g, logits, tau, noise[gi]);
            pieces.push_back(g.matmul(sel.probs, q.codes[i]));  // soft mixture, no hard pick
            out.indices.push_back(sel.indices);
            out.mean_probs.push_back(g.col_mean(g.softmax_rows(logits)));
            out.probs.push_back(std::move(sel.probs));
        } else {
            if (!fz.captured) {
                auto idx = kmeans_select(*parts[i], *q.codes[i]);
                std::vector<double> picked(parts[i]->data.size());
                const int K = cfg.code_dim;
                for (size_t t = 0; t < idx.size(); ++t)
                    std::copy_n(q.codes[i]->data.data() +
                                    static_cast<size_t>(idx[t]) * K,
                                K, picked.data() + t * K);
                fz.indices.push_back(std::move(idx));
                fz.z_values.push_back(parts[i]->data);
                fz.picked.push_back(std::move(picked));
            }
            const auto& idx = fz.indices[gi];
            auto frozen_z = g.constant(parts[i]->shape, fz.z_values[gi]);
            auto frozen_picked = g.constant(parts[i]->shape, fz.picked[gi]);
            auto code_term =
                mean_row_distance(g, frozen_z, g.gather_rows(q.codes[i], idx), cfg.squared_l2);
            auto commit_term =
                g.scale(mean_row_distance(g, parts[i], frozen_picked, cfg.squared_l2), cfg.beta);
            auto group_loss = g.add(code_term, commit_term);
            out.codebook_loss =
                out.codebook_loss ? g.add(out.codebook_loss, group_loss) : group_loss;
            std::vector<double> offset(fz.picked[gi].size());
            for (size_t k = 0; k < offset.size(); ++k)
                offset[k] = fz.picked[gi][k] - fz.z_values[gi][k];
            pieces.push_back(g.add(parts[i], g.constant(parts[i]->shape, offset)));
            out.indices.push_back(idx);
        }
    }
    fz.captured = true;
    out.z_hat = g.concat_cols(pieces);
    return out;
}

std::vector<std::vector<int>> select_eval_indices(const TensorPtr& z, const Quantizer& q) {
    const auto& cfg = q.cfg;
    Graph g; // scratch graph, values only
    auto parts = split(g, z, cfg.groups);
    std::vector<std::vector<int>> out;
    for (int i = 0; i < cfg.groups; ++i) {
        if (cfg.variant == QuantVariant::gumbel) {
            auto logits = g.add_rowvec(g.matmul(parts[i], q.proj_w[i]), q.proj_b[i]);
            const int T = logits->rows(), V = logits->cols();
            std::vector<int> idx(T);
            for (int t = 0; t < T; ++t) {
                const double* row = logits->data.data() + static_cast<size_t>(t) * V;
                int arg = 0;
                for (int v = 1; v < V; ++v)
                    if (row[v] > row[arg]) arg = v;
                idx[t] = arg;
            }
            out.push_back(std::move(idx));
        } else {
            out.push_back(kmeans_select(*parts[i], *q.codes[i]));
        }
    }
    return out;
}

void kmeans_init_codes(Quantizer& q, const Tensor& z_batch, Rng& rng) {
    const auto& cfg = q.cfg;
    if (cfg.variant != QuantVariant::kmeans)
        throw usage_error("kmeans_init_codes: quantizer is not the kmeans variant");
    const int T = z_batch.rows(), K = cfg.code_dim;
    if (z_batch.cols() != cfg.input_dim)
        throw shape_error("kmeans_init_codes: batch width does not match quantizer");
    // sample frames without replacement when possible, fresh draws per group
    for (int gi = 0; gi < cfg.groups; ++gi) {
        std::vector<int> pick(cfg.codes);
        if (T >= cfg.codes) {
            std::vector<int> order(T);
            std::iota(order.begin(), order.end(), 0);
            for (int i = T - 1; i > 0; --i)
                std::swap(order[i], order[rng.uniform_int(static_cast<uint64_t>(i + 1))]);
            std::copy_n(order.begin(), cfg.codes, pick.begin());
        } else {
            for (auto& p : pick) p = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(T)));
        }
        for (int v = 0; v < cfg.codes; ++v)
            for (int k = 0; k < K; ++k)
                q.codes[gi]->data[static_cast<size_t>(v) * K + k] =
                    z_batch.data[static_cast<size_t>(pick[v]) * cfg.input_dim + gi * K + k];
    }
}

UtilizationReport utilization(const std::vector<std::vector<int>>& indices_per_group, int codes) {
    if (indices_per_group.empty()) throw usage_error("utilization: no index streams");
    const int G = static_cast<int>(indices_per_group.size());
    const size_t T = indices_per_group[0].size();
    for (const auto& s : indices_per_group)
        if (s.size() != T) throw usage_error("utilization: streams differ in length");

    UtilizationReport rep;
    rep.joint_capacity = 1;
    for (int g = 0; g < G; ++g) {
        rep.joint_capacity *= codes;
        std::unordered_set<int> seen;
        for (int v : indices_per_group[g]) {
            if (v < 0 || v >= codes) throw usage_error("utilization: index out of range");
            seen.insert(v);
        }
        rep.per_group_used.push_back(static_cast<int>(seen.size()));
    }
    std::unordered_set<uint64_t> joint;
    for (size_t t = 0; t < T; ++t) {
        uint64_t key = 0;
        for (int g = 0; g < G; ++g)
            key = key * static_cast<uint64_t>(codes) + indices_per_group[g][t];
        joint.insert(key);
    }
    rep.joint_used = static_cast<int64_t>(joint.size());
    rep.joint_percent = 100.0 * rep.joint_used / rep.joint_capacity;
    return rep;
}

namespace {

// empirical mutual information in nats between two integer streams; ordered
// maps keep summation order fixed across runs
double mutual_information(const std::vector<int64_t>& a, const std::vector<int>& b,
                          double* h_b = nullptr) {
    const size_t n = a.size();
    std::map<int64_t, int64_t> ca;
    std::map<int, int64_t> cb;
    std::map<std::pair<int64_t, int>, int64_t> cab;
    for (size_t i = 0; i < n; ++i) {
        ++ca[a[i]];
        ++cb[b[i]];
        ++cab[{a[i], b[i]}];
    }
    double mi = 0;
    for (const auto& [key, c] : cab) {
        const double pab = static_cast<double>(c) / n;
        const double pa = static_cast<double>(ca[key.first]) / n;
        const double pb = static_cast<double>(cb[key.second]) / n;
        mi += pab * std::log(pab / (pa * pb));
    }
    if (h_b) {
        *h_b = 0;
        for (const auto& [key, c] : cb) {
            const double p = static_cast<double>(c) / n;
            *h_b -= p * std::log(p);
        }
    }
    return mi;
}

} // namespace

CollapseReport collapse_probe(const std::vector<std::vector<int>>& indices_per_group, int codes,
                              const std::vector<int>& labels, const std::vector<int>& positions) {
    const int G = static_cast<int>(indices_per_group.size());
    const size_t T = indices_per_group.empty() ? 0 : indices_per_group[0].size();
    if (T == 0) throw usage_error("collapse_probe: empty index stream");
    if (labels.size() != T || positions.size() != T)
        throw usage_error("collapse_probe: labels/positions length mismatch");

    std::vector<int64_t> joint(T);
    for (size_t t = 0; t < T; ++t) {
        uint64_t key = 0;
        for (int g = 0; g < G; ++g)
            key = key * static_cast<uint64_t>(codes) + indices_per_group[g][t];
        joint[t] = static_cast<int64_t>(key);
    }
    std::vector<int> buckets(T);
    for (size_t t = 0; t < T; ++t) buckets[t] = std::min(positions[t] / 10, 20);

    CollapseReport rep;
    rep.label_mi = mutual_information(joint, labels, &rep.label_entropy);
    rep.position_mi = mutual_information(joint, buckets, &rep.position_entropy);
    std::unordered_set<int64_t> used(joint.begin(), joint.end());
    rep.joint_used = static_cast<int64_t>(used.size());
    rep.vad_like = rep.joint_used <= 2 * G;
    rep.temporally_fixed = rep.position_mi > rep.label_mi;
    return rep;
}

} // namespace w2vc
