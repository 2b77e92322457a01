#include "w2vc/training.hpp"

#include "w2vc/errors.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

namespace w2vc {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian and written natively");

namespace {

bool all_finite(const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

int env_thread_cap() {
    const char* s = std::getenv("W2VC_NUM_THREADS");
    if (!s || !*s) return 0;
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end == s || *end != '\0' || v < 1)
        throw usage_error("W2VC_NUM_THREADS must be a positive integer, got '" + std::string(s) +
                          "'");
    return static_cast<int>(v);
}

json model_json(const ModelConfig& m) {
    return json{{"feat_dim", m.feat_dim},
                {"enc_dim", m.enc_dim},
                {"enc_layers", m.enc_layers},
                {"ctx_dim", m.ctx_dim},
                {"ctx_layers", m.ctx_layers},
                {"ff_dim", m.ff_dim},
                {"heads", m.heads},
                {"variant", variant_name(m.variant)},
                {"groups", m.groups},
                {"codes", m.codes},
                {"code_dim", m.code_dim},
                {"mask_count", m.mask_count},
                {"mask_max_frac", m.mask_max_frac},
                {"negatives", m.negatives},
                {"kappa", m.kappa},
                {"alpha", m.alpha},
                {"beta", m.beta},
                {"gamma_consistency", m.gamma_consistency},
                {"encoder_grad_scale", m.encoder_grad_scale},
                {"anchor_all_frames", m.anchor_all_frames},
                {"squared_l2", m.squared_l2},
                {"register_consistency_unused", m.register_consistency_unused}};
}

json config_json(const RunConfig& c) {
    return json{{"model", model_json(c.model)},
                {"steps", c.steps},
                {"batch_size", c.batch_size},
                {"lr_floor", c.lr_floor},
                {"lr_peak", c.lr_peak},
                {"lr_warmup", c.lr_warmup},
                {"seed", c.seed},
                {"checkpoint_every", c.checkpoint_every},
                {"variant_label", c.variant_label},
                {"tau_start", c.tau_start},
                {"tau_floor", c.tau_floor},
                {"tau_decay", c.tau_decay},
                {"grad_clip", c.grad_clip},
                {"util_window", c.util_window},
                {"num_threads", c.num_threads}};
}

// Fields a checkpoint does not have to agree on: they change how long or how
// noisily a run executes, not what any step computes.
void strip_execution_fields(json& j) {
    j.erase("steps");
    j.erase("checkpoint_every");
    j.erase("num_threads");
}

} // namespace

void RunConfig::validate() const {
    model.validate();
    if (steps < 0) throw config_error("steps must be >= 0");
    if (batch_size < 1) throw config_error("batch_size must be >= 1");
    if (!(lr_floor > 0.0)) throw config_error("lr_floor must be > 0");
    if (lr_peak < lr_floor) throw config_error("lr_peak must be >= lr_floor");
    if (lr_warmup < 1) throw config_error("lr_warmup must be >= 1");
    if (checkpoint_every < 0) throw config_error("checkpoint_every must be >= 0");
    if (!(tau_floor > 0.0)) throw config_error("tau_floor must be > 0");
    if (tau_start < tau_floor) throw config_error("tau_start must be >= tau_floor");
    if (!(tau_decay > 0.0) || tau_decay > 1.0) throw config_error("tau_decay must be in (0, 1]");
    if (grad_clip < 0.0) throw config_error("grad_clip must be >= 0");
    if (util_window < 1) throw config_error("util_window must be >= 1");
    if (num_threads < 1) throw config_error("num_threads must be >= 1");
    const std::string expect = variant_label_for(model.gamma_consistency, model.variant);
    if (variant_label != expect)
        throw config_error("variant_label '" + variant_label +
                           "' contradicts gamma_consistency=" +
                           std::to_string(model.gamma_consistency) + " with the " +
                           variant_name(model.variant) + " quantizer (expected '" + expect + "')");
}

std::string variant_label_for(int gamma_consistency, QuantVariant variant) {
    std::string s = gamma_consistency == 1 ? "w2vC" : "w2v2";
    s += variant == QuantVariant::gumbel ? "-GS" : "-KM";
    return s;
}

void apply_variant_label(RunConfig& cfg, const std::string& label) {
    if (label == "w2v2-GS") {
        cfg.model.gamma_consistency = 0;
        cfg.model.variant = QuantVariant::gumbel;
    } else if (label == "w2v2-KM") {
        cfg.model.gamma_consistency = 0;
        cfg.model.variant = QuantVariant::kmeans;
    } else if (label == "w2vC-GS") {
        cfg.model.gamma_consistency = 1;
        cfg.model.variant = QuantVariant::gumbel;
    } else if (label == "w2vC-KM") {
        cfg.model.gamma_consistency = 1;
        cfg.model.variant = QuantVariant::kmeans;
    } else {
        throw config_error("unknown variant label '" + label +
                           "' (expected w2v2-GS, w2v2-KM, w2vC-GS or w2vC-KM)");
    }
    cfg.variant_label = label;
}

double lr_schedule(int64_t step, const RunConfig& cfg) {
    if (step < 0) step = 0;
    const double frac =
        std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.lr_warmup));
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * frac;
}

double tau_at(int64_t step, const RunConfig& cfg) {
    if (step < 0) step = 0;
    return std::max(cfg.tau_floor, cfg.tau_start * std::pow(cfg.tau_decay,
                                                            static_cast<double>(step)));
}

TrainState make_state(const ParamRegistry& reg, const RunConfig& cfg) {
    TrainState st;
    const auto& params = reg.all();
    st.m.resize(params.size());
    st.v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        st.m[i].assign(params[i]->data.size(), 0.0);
        st.v[i].assign(params[i]->data.size(), 0.0);
    }
    st.rng = Rng(mix_seed(cfg.seed, "train_master"));
    st.tau = tau_at(0, cfg);
    st.lr = lr_schedule(0, cfg);
    return st;
}

bool adam_step(const ParamRegistry& reg, const GradSink& grads, TrainState& st, double rate) {
    const auto& params = reg.all();
    if (st.m.size() != params.size() || st.v.size() != params.size())
        throw usage_error("adam_step: optimizer state does not match the registry");
    for (size_t pid = 0; pid < params.size(); ++pid) {
        if (pid >= grads.size() || grads[pid].empty()) continue;
        if (grads[pid].size() != params[pid]->data.size())
            throw usage_error("adam_step: gradient size mismatch for " + params[pid]->name);
        if (!all_finite(grads[pid])) return false;
    }
    ++st.adam_t;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(st.adam_t));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(st.adam_t));
    for (size_t pid = 0; pid < params.size(); ++pid) {
        auto& p = params[pid]->data;
        auto& m = st.m[pid];
        auto& v = st.v[pid];
        const double* gp =
            pid < grads.size() && !grads[pid].empty() ? grads[pid].data() : nullptr;
        for (size_t i = 0; i < p.size(); ++i) {
            const double gi = gp ? gp[i] : 0.0;
            m[i] = 0.9 * m[i] + 0.1 * gi;
            v[i] = 0.999 * v[i] + 0.001 * gi * gi;
            p[i] -= rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
        }
    }
    return true;
}

UtteranceDraws draw_utterance_randomness(int T, const ModelConfig& cfg, Rng& rng) {
    UtteranceDraws d;
    d.masks = sample_masks(T, cfg, rng);
    std::vector<int> anchors;
    if (cfg.anchor_all_frames) {
        anchors.resize(static_cast<size_t>(T));
        std::iota(anchors.begin(), anchors.end(), 0);
    } else {
        anchors = d.masks.masked;
    }
    d.negatives = sample_negatives(T, anchors, cfg.negatives, rng);
    d.noise = draw_quantize_noise(T, cfg.quantizer_config(), rng);
    return d;
}

UtteranceOutcome utterance_forward(Graph& g, const Model& model, const std::vector<double>& x,
                                   int T, const UtteranceDraws& draws, double tau,
                                   QuantFreeze* freeze) {
    const ModelConfig& cfg = model.cfg;
    if (T < 1) throw shape_error("utterance_forward: T must be >= 1");
    if (x.size() != static_cast<size_t>(T) * cfg.feat_dim)
        throw shape_error("utterance_forward: feature buffer is " + std::to_string(x.size()) +
                          " doubles, expected " + std::to_string(T) + " x " +
                          std::to_string(cfg.feat_dim));
    const TensorPtr xt = g.constant({T, cfg.feat_dim}, x);
    const TensorPtr z = encoder_forward(g, model, xt);
    const QuantizeResult qr = freeze
                                  ? quantize_linearized(g, z, model.quantizer, tau, draws.noise,
                                                        *freeze)
                                  : quantize(g, z, model.quantizer, tau, draws.noise);
    const TensorPtr z_masked = apply_masks(g, z, draws.masks, model.mask_emb);
    const TensorPtr c = context_forward(g, model, z_masked);
    const TensorPtr cp = compare_project(g, model, c);
    const ContrastiveResult contrast = contrastive_loss(g, cp, qr.z_hat, draws.negatives,
                                                        cfg.kappa);
    TensorPtr codebook_raw;
    bool apply_alpha = false;
    if (cfg.variant == QuantVariant::gumbel) {
        codebook_raw = diversity_loss(g, qr.mean_probs, cfg.codes);
        apply_alpha = true;
    } else {
        codebook_raw = qr.codebook_loss;
    }
    TensorPtr l_c;
    if (cfg.gamma_consistency == 1) {
        const TensorPtr recon = consistency_forward(g, model, qr.z_hat);
        l_c = consistency_loss(g, xt, recon);
    }
    UtteranceOutcome out;
    out.losses = total_loss(g, contrast.loss, codebook_raw, apply_alpha, cfg.alpha, l_c,
                            cfg.gamma_consistency);
    out.indices = qr.indices;
    out.zero_norm_pairs = contrast.zero_norm_pairs;
    out.anchors = static_cast<int>(draws.negatives.anchors.size());
    return out;
}

namespace {

struct SlotResult {
    double total = 0.0;
    double contrast = 0.0;
    double codebook = 0.0;
    double consistency = 0.0;
    std::vector<std::vector<int>> indices;
    GradSink sink;
};

// Rethrows eptr with the utterance id prepended, keeping the error type.
[[noreturn]] void rethrow_with_id(std::exception_ptr eptr, const std::string& id) {
    const std::string prefix = "utterance '" + id + "': ";
    try {
        std::rethrow_exception(eptr);
    } catch (const shape_error& e) {
        throw shape_error(prefix + e.what());
    } catch (const config_error& e) {
        throw config_error(prefix + e.what());
    } catch (const usage_error& e) {
        throw usage_error(prefix + e.what());
    } catch (const data_error& e) {
        throw data_error(prefix + e.what());
    } catch (const numeric_error& e) {
        throw numeric_error(prefix + e.what());
    }
}

} // namespace

StepMetrics train_step(const std::vector<Utterance>& corpus, const Model& model,
                       const ParamRegistry& reg, TrainState& st, const RunConfig& cfg) {
    if (corpus.empty()) throw data_error("train_step: corpus is empty");
    const int B = cfg.batch_size;
    const size_t n_params = reg.all().size();

    // Master-stream draws, fixed order: batch indices first, then one
    // sub-seed per slot. Worker count never touches this stream.
    std::vector<size_t> picks(static_cast<size_t>(B));
    for (auto& p : picks) p = static_cast<size_t>(st.rng.uniform_int(corpus.size()));
    std::vector<uint64_t> sub_seeds(static_cast<size_t>(B));
    for (auto& s : sub_seeds) s = st.rng.next_u64();

    const double lr = lr_schedule(st.step, cfg);
    const double tau = tau_at(st.step, cfg);
    st.tau = tau;
    st.lr = lr;

    std::vector<SlotResult> slots(static_cast<size_t>(B));
    std::vector<std::exception_ptr> errors(static_cast<size_t>(B));
    const int cap = env_thread_cap();
    int n_workers = std::min(cfg.num_threads, B);
    if (cap > 0) n_workers = std::min(n_workers, cap);

    auto run_slot = [&](int b) {
        const Utterance& u = corpus[picks[static_cast<size_t>(b)]];
        Rng rng(sub_seeds[static_cast<size_t>(b)]);
        Graph g;
        const UtteranceDraws draws = draw_utterance_randomness(u.T, model.cfg, rng);
        const UtteranceOutcome out = utterance_forward(g, model, u.x, u.T, draws, tau);
        SlotResult& r = slots[static_cast<size_t>(b)];
        r.total = out.losses.total->data[0];
        r.contrast = out.losses.contrast->data[0];
        r.codebook = out.losses.codebook->data[0];
        r.consistency = out.losses.consistency ? out.losses.consistency->data[0] : 0.0;
        r.indices = out.indices;
        r.sink.resize(n_params);
        const TensorPtr scaled = g.scale(out.losses.total, 1.0 / static_cast<double>(B));
        g.backward(scaled, r.sink);
    };

    if (n_workers <= 1) {
        for (int b = 0; b < B; ++b) {
            try {
                run_slot(b);
            } catch (...) {
                errors[static_cast<size_t>(b)] = std::current_exception();
                break;
            }
        }
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) {
            pool.emplace_back([&, w] {
                for (int b = w; b < B; b += n_workers) {
                    try {
                        run_slot(b);
                    } catch (...) {
                        errors[static_cast<size_t>(b)] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (int b = 0; b < B; ++b)
        if (errors[static_cast<size_t>(b)])
            rethrow_with_id(errors[static_cast<size_t>(b)],
                            corpus[picks[static_cast<size_t>(b)]].id);

    // Slot-order reduction: the per-parameter sums never depend on worker
    // scheduling.
    GradSink grads(n_params);
    for (size_t pid = 0; pid < n_params; ++pid)
        grads[pid].assign(reg.all()[pid]->data.size(), 0.0);
    for (const auto& slot : slots)
        for (size_t pid = 0; pid < n_params; ++pid) {
            if (slot.sink[pid].empty()) continue;
            double* acc = grads[pid].data();
            const double* g = slot.sink[pid].data();
            for (size_t i = 0; i < slot.sink[pid].size(); ++i) acc[i] += g[i];
        }

    double sq = 0.0;
    for (const auto& row : grads)
        for (double g : row) sq += g * g;
    const double grad_norm = std::sqrt(sq);
    if (cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip && std::isfinite(grad_norm)) {
        const double f = cfg.grad_clip / grad_norm;
        for (auto& row : grads)
            for (double& g : row) g *= f;
    }

    StepMetrics mt;
    mt.lr = lr;
    mt.tau = tau;
    mt.grad_norm = grad_norm;
    for (const auto& slot : slots) {
        mt.total += slot.total;
        mt.contrast += slot.contrast;
        mt.codebook += slot.codebook;
        mt.consistency += slot.consistency;
    }
    mt.total /= B;
    mt.contrast /= B;
    mt.codebook /= B;
    mt.consistency /= B;

    bool applied = std::isfinite(mt.total);
    if (applied) applied = adam_step(reg, grads, st, lr);
    if (!applied) {
        ++st.skipped;
        std::fprintf(stderr, "step %" PRId64 " skipped: non-finite loss or gradient\n",
                     st.step + 1);
    } else {
        for (const auto& p : reg.all())
            if (!all_finite(p->data))
                throw numeric_error("parameter " + p->name + " became non-finite after update " +
                                    std::to_string(st.adam_t));
    }
    mt.applied = applied;

    const int groups = model.cfg.groups;
    std::vector<std::vector<int>> step_indices(static_cast<size_t>(groups));
    for (const auto& slot : slots)
        for (int gi = 0; gi < groups; ++gi)
            step_indices[static_cast<size_t>(gi)].insert(
                step_indices[static_cast<size_t>(gi)].end(),
                slot.indices[static_cast<size_t>(gi)].begin(),
                slot.indices[static_cast<size_t>(gi)].end());
    st.recent_indices.push_back(std::move(step_indices));
    while (st.recent_indices.size() > static_cast<size_t>(cfg.util_window))
        st.recent_indices.pop_front();

    std::vector<std::vector<int>> window(static_cast<size_t>(groups));
    for (const auto& step_entry : st.recent_indices)
        for (int gi = 0; gi < groups; ++gi)
            window[static_cast<size_t>(gi)].insert(window[static_cast<size_t>(gi)].end(),
                                                   step_entry[static_cast<size_t>(gi)].begin(),
                                                   step_entry[static_cast<size_t>(gi)].end());
    const UtilizationReport ur = utilization(window, model.cfg.codes);
    mt.util_group.resize(static_cast<size_t>(groups));
    for (int gi = 0; gi < groups; ++gi)
        mt.util_group[static_cast<size_t>(gi)] =
            static_cast<double>(ur.per_group_used[static_cast<size_t>(gi)]) / model.cfg.codes;
    mt.util_joint = static_cast<double>(ur.joint_used) / static_cast<double>(ur.joint_capacity);

    ++st.step;
    mt.step = st.step;
    return mt;
}

std::string metrics_header(int groups) {
    std::string h = "step,L,L_m,L_cb,L_c,lr,tau";
    for (int g = 0; g < groups; ++g) h += ",util_g" + std::to_string(g);
    h += ",util_joint,grad_norm";
    return h;
}

std::string metrics_row(const StepMetrics& m, int groups) {
    if (m.util_group.size() != static_cast<size_t>(groups))
        throw usage_error("metrics_row: expected " + std::to_string(groups) +
                          " group utilization entries");
    std::string row = std::to_string(m.step);
    row += ',' + fmt_double(m.total);
    row += ',' + fmt_double(m.contrast);
    row += ',' + fmt_double(m.codebook);
    row += ',' + fmt_double(m.consistency);
    row += ',' + fmt_double(m.lr);
    row += ',' + fmt_double(m.tau);
    for (double u : m.util_group) row += ',' + fmt_double(u);
    row += ',' + fmt_double(m.util_joint);
    row += ',' + fmt_double(m.grad_norm);
    return row;
}

namespace {

constexpr char kMagic[4] = {'W', '2', 'V', 'C'};
constexpr uint32_t kVersion = 1;
// field tags
constexpr uint32_t kTagConfig = 1;
constexpr uint32_t kTagStep = 2;
constexpr uint32_t kTagAdamT = 3;
constexpr uint32_t kTagSkipped = 4;
constexpr uint32_t kTagRng = 5;
constexpr uint32_t kTagTau = 6;
constexpr uint32_t kTagParams = 7;
constexpr uint32_t kTagWindow = 8;
constexpr uint32_t kTagEnd = 0xffffffffu;

void w_bytes(std::ofstream& f, const void* p, size_t n) {
    f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
void w_u32(std::ofstream& f, uint32_t v) { w_bytes(f, &v, sizeof v); }
void w_u64(std::ofstream& f, uint64_t v) { w_bytes(f, &v, sizeof v); }
void w_i64(std::ofstream& f, int64_t v) { w_bytes(f, &v, sizeof v); }
void w_f64(std::ofstream& f, double v) { w_bytes(f, &v, sizeof v); }
void w_str(std::ofstream& f, const std::string& s) {
    w_u64(f, s.size());
    w_bytes(f, s.data(), s.size());
}
void w_dvec(std::ofstream& f, const std::vector<double>& v) {
    w_u64(f, v.size());
    w_bytes(f, v.data(), v.size() * sizeof(double));
}
void w_ivec(std::ofstream& f, const std::vector<int>& v) {
    w_u64(f, v.size());
    for (int x : v) {
        const int32_t y = x;
        w_bytes(f, &y, sizeof y);
    }
}

void r_bytes(std::ifstream& f, void* p, size_t n) {
    f.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!f) throw data_error("checkpoint: truncated file");
}
uint32_t r_u32(std::ifstream& f) {
    uint32_t v;
    r_bytes(f, &v, sizeof v);
    return v;
}
uint64_t r_u64(std::ifstream& f) {
    uint64_t v;
    r_bytes(f, &v, sizeof v);
    return v;
}
int64_t r_i64(std::ifstream& f) {
    int64_t v;
    r_bytes(f, &v, sizeof v);
    return v;
}
double r_f64(std::ifstream& f) {
    double v;
    r_bytes(f, &v, sizeof v);
    return v;
}
std::string r_str(std::ifstream& f) {
    const uint64_t n = r_u64(f);
    if (n > (1ull << 32)) throw data_error("checkpoint: string length is implausible");
    std::string s(n, '\0');
    if (n) r_bytes(f, s.data(), n);
    return s;
}
std::vector<double> r_dvec(std::ifstream& f) {
    const uint64_t n = r_u64(f);
    if (n > (1ull << 32)) throw data_error("checkpoint: vector length is implausible");
    std::vector<double> v(n);
    if (n) r_bytes(f, v.data(), n * sizeof(double));
    return v;
}
std::vector<int> r_ivec(std::ifstream& f) {
    const uint64_t n = r_u64(f);
    if (n > (1ull << 32)) throw data_error("checkpoint: vector length is implausible");
    std::vector<int> v(n);
    for (auto& x : v) {
        int32_t y;
        r_bytes(f, &y, sizeof y);
        x = y;
    }
    return v;
}

} // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParamRegistry& reg,
                     const TrainState& st) {
    const auto& params = reg.all();
    if (st.m.size() != params.size() || st.v.size() != params.size())
        throw usage_error("save_checkpoint: optimizer state does not match the registry");
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot write checkpoint '" + path + "'");
    w_bytes(f, kMagic, sizeof kMagic);
    w_u32(f, kVersion);
    w_u32(f, kTagConfig);
    w_str(f, config_json(cfg).dump());
    w_u32(f, kTagStep);
    w_i64(f, st.step);
    w_u32(f, kTagAdamT);
    w_i64(f, st.adam_t);
    w_u32(f, kTagSkipped);
    w_i64(f, st.skipped);
    w_u32(f, kTagRng);
    for (uint64_t s : st.rng.state()) w_u64(f, s);
    w_u32(f, kTagTau);
    w_f64(f, st.tau);
    w_u32(f, kTagParams);
    w_u64(f, params.size());
    for (size_t pid = 0; pid < params.size(); ++pid) {
        w_str(f, params[pid]->name);
        w_dvec(f, params[pid]->data);
        w_dvec(f, st.m[pid]);
        w_dvec(f, st.v[pid]);
    }
    w_u32(f, kTagWindow);
    w_u64(f, st.recent_indices.size());
    for (const auto& step_entry : st.recent_indices) {
        w_u32(f, static_cast<uint32_t>(step_entry.size()));
        for (const auto& gi : step_entry) w_ivec(f, gi);
    }
    w_u32(f, kTagEnd);
    f.flush();
    if (!f) throw data_error("writing checkpoint '" + path + "' failed");
}

void load_checkpoint(const std::string& path, const RunConfig& cfg, const ParamRegistry& reg,
                     TrainState& st) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open checkpoint '" + path + "'");
    char magic[4];
    r_bytes(f, magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw data_error("'" + path + "' is not a checkpoint file");
    const uint32_t version = r_u32(f);
    if (version != kVersion)
        throw data_error("checkpoint version " + std::to_string(version) + " is not supported");

    const auto& params = reg.all();
    if (st.m.size() != params.size() || st.v.size() != params.size())
        throw usage_error("load_checkpoint: optimizer state does not match the registry");

    bool saw_config = false, saw_params = false;
    for (;;) {
        const uint32_t tag = r_u32(f);
        if (tag == kTagEnd) break;
        switch (tag) {
        case kTagConfig: {
            json stored = json::parse(r_str(f), nullptr, false);
            if (stored.is_discarded()) throw data_error("checkpoint: config echo is not JSON");
            json expected = config_json(cfg);
            strip_execution_fields(stored);
            strip_execution_fields(expected);
            if (stored != expected) {
                std::string diff;
                const json fs = stored.flatten();
                const json fe = expected.flatten();
                for (auto it = fe.begin(); it != fe.end(); ++it) {
                    if (!fs.contains(it.key()) || fs[it.key()] != it.value()) {
                        diff = it.key();
                        break;
                    }
                }
                if (diff.empty())
                    for (auto it = fs.begin(); it != fs.end(); ++it)
                        if (!fe.contains(it.key())) {
                            diff = it.key();
                            break;
                        }
                throw data_error("checkpoint configuration does not match the run configuration (first difference at '" +
                                 diff + "')");
            }
            saw_config = true;
            break;
        }
        case kTagStep:
            st.step = r_i64(f);
            break;
        case kTagAdamT:
            st.adam_t = r_i64(f);
            break;
        case kTagSkipped:
            st.skipped = r_i64(f);
            break;
        case kTagRng: {
            std::array<uint64_t, 4> s;
            for (auto& x : s) x = r_u64(f);
            st.rng.set_state(s);
            break;
        }
        case kTagTau:
            st.tau = r_f64(f);
            break;
        case kTagParams: {
            const uint64_t count = r_u64(f);
            if (count != params.size())
                throw data_error("checkpoint holds " + std::to_string(count) +
                                 " parameters, the model has " + std::to_string(params.size()));
            for (uint64_t i = 0; i < count; ++i) {
                const std::string name = r_str(f);
                const TensorPtr t = reg.find(name);
                if (!t) throw data_error("checkpoint parameter '" + name + "' is not in the model");
                std::vector<double> vals = r_dvec(f);
                std::vector<double> mv = r_dvec(f);
                std::vector<double> vv = r_dvec(f);
                if (vals.size() != t->data.size())
                    throw data_error("checkpoint parameter '" + name + "' has " +
                                     std::to_string(vals.size()) + " values, the model expects " +
                                     std::to_string(t->data.size()));
                t->data = std::move(vals);
                st.m[static_cast<size_t>(t->param_id)] = std::move(mv);
                st.v[static_cast<size_t>(t->param_id)] = std::move(vv);
            }
            saw_params = true;
            break;
        }
        case kTagWindow: {
            const uint64_t steps = r_u64(f);
            if (steps > (1ull << 24)) throw data_error("checkpoint: window size is implausible");
            st.recent_indices.clear();
            for (uint64_t i = 0; i < steps; ++i) {
                const uint32_t groups = r_u32(f);
                std::vector<std::vector<int>> entry(groups);
                for (auto& gi : entry) gi = r_ivec(f);
                st.recent_indices.push_back(std::move(entry));
            }
            break;
        }
        default:
            throw data_error("checkpoint: unknown field tag " + std::to_string(tag));
        }
    }
    if (!saw_config || !saw_params)
        throw data_error("checkpoint is missing required fields");
}

std::string run_config_json_string(const RunConfig& cfg) { return config_json(cfg).dump(2); }

RunConfig run_config_from_json_string(const std::string& text) {
    const json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) throw data_error("run config is not valid JSON");
    RunConfig cfg;
    try {
        const json& m = j.at("model");
        ModelConfig& mc = cfg.model;
        mc.feat_dim = m.at("feat_dim").get<int>();
        mc.enc_dim = m.at("enc_dim").get<int>();
        mc.enc_layers = m.at("enc_layers").get<int>();
        mc.ctx_dim = m.at("ctx_dim").get<int>();
        mc.ctx_layers = m.at("ctx_layers").get<int>();
        mc.ff_dim = m.at("ff_dim").get<int>();
        mc.heads = m.at("heads").get<int>();
        mc.variant = parse_variant(m.at("variant").get<std::string>());
        mc.groups = m.at("groups").get<int>();
        mc.codes = m.at("codes").get<int>();
        mc.code_dim = m.at("code_dim").get<int>();
        mc.mask_count = m.at("mask_count").get<int>();
        mc.mask_max_frac = m.at("mask_max_frac").get<double>();
        mc.negatives = m.at("negatives").get<int>();
        mc.kappa = m.at("kappa").get<double>();
        mc.alpha = m.at("alpha").get<double>();
        mc.beta = m.at("beta").get<double>();
        mc.gamma_consistency = m.at("gamma_consistency").get<int>();
        mc.encoder_grad_scale = m.at("encoder_grad_scale").get<double>();
        mc.anchor_all_frames = m.at("anchor_all_frames").get<bool>();
        mc.squared_l2 = m.at("squared_l2").get<bool>();
        mc.register_consistency_unused = m.at("register_consistency_unused").get<bool>();
        cfg.steps = j.at("steps").get<int64_t>();
        cfg.batch_size = j.at("batch_size").get<int>();
        cfg.lr_floor = j.at("lr_floor").get<double>();
        cfg.lr_peak = j.at("lr_peak").get<double>();
        cfg.lr_warmup = j.at("lr_warmup").get<int64_t>();
        cfg.seed = j.at("seed").get<uint64_t>();
        cfg.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
        cfg.variant_label = j.at("variant_label").get<std::string>();
        cfg.tau_start = j.at("tau_start").get<double>();
        cfg.tau_floor = j.at("tau_floor").get<double>();
        cfg.tau_decay = j.at("tau_decay").get<double>();
        cfg.grad_clip = j.at("grad_clip").get<double>();
        cfg.util_window = j.at("util_window").get<int>();
        cfg.num_threads = j.at("num_threads").get<int>();
    } catch (const json::exception& e) {
        throw data_error(std::string("run config JSON is missing or mistypes a field: ") +
                         e.what());
    }
    cfg.validate();
    return cfg;
}

RunConfig read_checkpoint_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open checkpoint '" + path + "'");
    char magic[4];
    r_bytes(f, magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw data_error("'" + path + "' is not a checkpoint file");
    const uint32_t version = r_u32(f);
    if (version != kVersion)
        throw data_error("checkpoint version " + std::to_string(version) + " is not supported");
    if (r_u32(f) != kTagConfig) throw data_error("checkpoint does not start with a config record");
    return run_config_from_json_string(r_str(f));
}

std::vector<Utterance> load_corpus(const CorpusManifest& manifest) {
    std::vector<Utterance> corpus;
    corpus.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) corpus.push_back(load_utterance(e, manifest.stats));
    return corpus;
}

TrainResult train_loop(const RunConfig& cfg_in, const CorpusManifest& manifest_in,
                       const std::string& out_dir, const std::string& resume_ckpt) {
    RunConfig cfg = cfg_in;
    cfg.validate();
    CorpusManifest manifest = manifest_in;
    if (manifest.dim != cfg.model.feat_dim)
        throw data_error("corpus feature dim " + std::to_string(manifest.dim) +
                         " does not match the model feat_dim " +
                         std::to_string(cfg.model.feat_dim));
    if (!manifest.stats.valid) manifest.stats = compute_norm_stats(manifest);
    const std::vector<Utterance> corpus = load_corpus(manifest);
    if (corpus.empty()) throw data_error("corpus is empty");

    std::filesystem::create_directories(out_dir);
    ParamRegistry reg;
    Model model = Model::build(reg, cfg.model, cfg.seed);
    TrainState st = make_state(reg, cfg);

    if (!resume_ckpt.empty()) {
        load_checkpoint(resume_ckpt, cfg, reg, st);
    } else if (cfg.model.variant == QuantVariant::kmeans) {
        // Codes start on real encoder output so no code is born dead. Drawn
        // from a named side stream; the master stream is untouched, so a
        // resumed run and an uninterrupted one stay identical.
        const size_t boot = std::min(static_cast<size_t>(cfg.batch_size), corpus.size());
        Graph g;
        std::vector<TensorPtr> zs;
        for (size_t i = 0; i < boot; ++i) {
            const TensorPtr xt = g.constant({corpus[i].T, cfg.model.feat_dim}, corpus[i].x);
            zs.push_back(encoder_forward(g, model, xt));
        }
        const TensorPtr z_all = zs.size() == 1 ? zs[0] : g.concat_rows(zs);
        Rng boot_rng(mix_seed(cfg.seed, "kmeans_boot"));
        kmeans_init_codes(model.quantizer, *z_all, boot_rng);
    }

    {
        std::ofstream cf(out_dir + "/config.json", std::ios::trunc);
        if (!cf) throw data_error("cannot write '" + out_dir + "/config.json'");
        cf << config_json(cfg).dump(2) << "\n";
    }

    TrainResult result;
    result.metrics_path = out_dir + "/metrics.csv";
    result.start_step = st.step;

    const bool append = !resume_ckpt.empty() && std::filesystem::exists(result.metrics_path);
    std::ofstream mf(result.metrics_path,
                     append ? (std::ios::out | std::ios::app) : std::ios::trunc);
    if (!mf) throw data_error("cannot write '" + result.metrics_path + "'");
    if (!append) mf << metrics_header(cfg.model.groups) << "\n";

    while (st.step < cfg.steps) {
        const StepMetrics sm = train_step(corpus, model, reg, st, cfg);
        mf << metrics_row(sm, cfg.model.groups) << "\n";
        mf.flush();
        if (cfg.checkpoint_every > 0 &&
            (st.step % cfg.checkpoint_every == 0 || st.step == cfg.steps)) {
            char name[64];
            std::snprintf(name, sizeof name, "ckpt_%06" PRId64 ".bin", st.step);
            result.checkpoint_path = out_dir + "/" + name;
            save_checkpoint(result.checkpoint_path, cfg, reg, st);
        }
    }
    result.final_step = st.step;
    return result;
}

EvalReport evaluate_codebook(const Model& model, const CorpusManifest& manifest,
                             const std::vector<Utterance>& corpus) {
    if (manifest.dim != model.cfg.feat_dim)
        throw data_error("corpus feature dim " + std::to_string(manifest.dim) +
                         " does not match the model feat_dim " +
                         std::to_string(model.cfg.feat_dim));
    if (corpus.empty()) throw data_error("evaluate_codebook: corpus is empty");

    const int groups = model.cfg.groups;
    EvalReport rep;
    rep.has_labels = !manifest.templates.empty();
    std::vector<std::vector<int>> all_indices(static_cast<size_t>(groups));
    std::vector<int> labels;
    std::vector<int> positions;
    for (const auto& u : corpus) {
        Graph g;
        const TensorPtr xt = g.constant({u.T, u.F}, u.x);
        const TensorPtr z = encoder_forward(g, model, xt);
        const auto idx = select_eval_indices(z, model.quantizer);
        for (int gi = 0; gi < groups; ++gi)
            all_indices[static_cast<size_t>(gi)].insert(all_indices[static_cast<size_t>(gi)].end(),
                                                        idx[static_cast<size_t>(gi)].begin(),
                                                        idx[static_cast<size_t>(gi)].end());
        for (int t = 0; t < u.T; ++t) positions.push_back(t);
        if (rep.has_labels) {
            const std::vector<double> raw = denormalize(u.x, u.F, manifest.stats);
            const std::vector<int> lab = nearest_template_labels(raw, u.T, u.F,
                                                                 manifest.templates);
            labels.insert(labels.end(), lab.begin(), lab.end());
        }
        rep.frames += u.T;
    }
    if (!rep.has_labels) labels.assign(positions.size(), 0);

    const UtilizationReport ur = utilization(all_indices, model.cfg.codes);
    rep.per_group_used = ur.per_group_used;
    rep.per_group_percent.resize(static_cast<size_t>(groups));
    for (int gi = 0; gi < groups; ++gi)
        rep.per_group_percent[static_cast<size_t>(gi)] =
            100.0 * ur.per_group_used[static_cast<size_t>(gi)] / model.cfg.codes;
    rep.joint_used = ur.joint_used;
    rep.joint_capacity = ur.joint_capacity;
    rep.joint_percent = ur.joint_percent;
    rep.probe = collapse_probe(all_indices, model.cfg.codes, labels, positions);
    return rep;
}

} // namespace w2vc
