#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "w2vc/frontend.hpp"
#include "w2vc/losses.hpp"
#include "w2vc/network.hpp"
#include "w2vc/quantizer.hpp"

namespace w2vc {

// Everything a run needs beyond the model itself. The variant label is the
// user-facing name for the (gamma, quantizer) combination and must agree with
// the model fields; validate() rejects mismatches instead of guessing.
struct RunConfig {
    ModelConfig model;
    int steps = 500;
    int batch_size = 8;
    double lr_floor = 1e-5;
    double lr_peak = 2e-3;
    int lr_warmup = 100;
    uint64_t seed = 1;
    int checkpoint_every = 100;
    std::string variant_label = "w2v2-GS";
    double tau_start = 2.0;
    double tau_floor = 0.5;
    double tau_decay = 0.995;
    double grad_clip = 1.0; // global norm cap; 0 disables clipping
    int util_window = 20;   // steps of code indices kept for utilization metrics
    int num_threads = 1;    // forward/backward workers per step

    void validate() const;
};

// "w2v2-GS", "w2v2-KM", "w2vC-GS", "w2vC-KM"
std::string variant_label_for(int gamma_consistency, QuantVariant variant);
// Sets model.gamma_consistency and model.variant from the label; throws
// config_error on an unknown label.
void apply_variant_label(RunConfig& cfg, const std::string& label);

// Linear warmup from lr_floor at step 0 to lr_peak at step lr_warmup, flat
// afterwards. step is the 0-based index of the update about to be applied.
double lr_schedule(int64_t step, const RunConfig& cfg);

// Gumbel temperature at a given step: start * decay^step, floored.
double tau_at(int64_t step, const RunConfig& cfg);

// Mutable side of a run. Moments are indexed like ParamRegistry::all().
struct TrainState {
    int64_t step = 0;    // completed steps
    int64_t adam_t = 0;  // accepted updates, drives bias correction
    int64_t skipped = 0; // steps dropped because of non-finite gradients
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    Rng rng;
    double tau = 0.0;
    double lr = 0.0; // rate used by the most recent step
    // last util_window steps of selected indices, one entry per step holding
    // groups x frame picks for the whole batch
    std::deque<std::vector<std::vector<int>>> recent_indices;
};

TrainState make_state(const ParamRegistry& reg, const RunConfig& cfg);

// One Adam update over every registered parameter. Missing or empty sink rows
// count as zero gradient (the moments still decay). Returns false and leaves
// parameters and moments untouched when any gradient is non-finite.
bool adam_step(const ParamRegistry& reg, const GradSink& grads, TrainState& st, double rate);

// Everything random one utterance consumes in one step, drawn in the fixed
// order masks -> negatives -> quantizer noise so streams never shift.
struct UtteranceDraws {
    MaskSpec masks;
    NegativeSet negatives;
    std::vector<std::vector<double>> noise;
};
UtteranceDraws draw_utterance_randomness(int T, const ModelConfig& cfg, Rng& rng);

struct UtteranceOutcome {
    LossBreakdown losses;
    std::vector<std::vector<int>> indices; // groups x T selected codes
    int zero_norm_pairs = 0;
    int anchors = 0;
};

// Full forward pass and loss assembly for one utterance (x is row-major
// [T x feat_dim]). With freeze set, the quantizer runs in its linearized mode
// so repeated calls stay differentiable around a fixed selection; production
// passes leave it null.
UtteranceOutcome utterance_forward(Graph& g, const Model& model, const std::vector<double>& x,
                                   int T, const UtteranceDraws& draws, double tau,
                                   QuantFreeze* freeze = nullptr);

struct StepMetrics {
    int64_t step = 0; // 1-based, value after the step completed
    double total = 0.0;
    double contrast = 0.0;
    double codebook = 0.0;
    double consistency = 0.0;
    double lr = 0.0;
    double tau = 0.0;
    double grad_norm = 0.0;
    std::vector<double> util_group; // window utilization per group, fraction of codes
    double util_joint = 0.0;        // window joint utilization, fraction of codes^groups
    bool applied = true;            // false when the update was skipped
};

// One optimizer step over a fresh batch sampled from the corpus.
StepMetrics train_step(const std::vector<Utterance>& corpus, const Model& model,
                       const ParamRegistry& reg, TrainState& st, const RunConfig& cfg);

// CSV row formatting for the metrics log; shortest round-trip decimals so the
// file is byte-stable across runs.
std::string metrics_header(int groups);
std::string metrics_row(const StepMetrics& m, int groups);

void save_checkpoint(const std::string& path, const RunConfig& cfg, const ParamRegistry& reg,
                     const TrainState& st);
// Restores parameters, moments and RNG state into an already-built model. The
// stored config must describe the same training dynamics as cfg; run length,
// checkpoint cadence and thread count may differ.
void load_checkpoint(const std::string& path, const RunConfig& cfg, const ParamRegistry& reg,
                     TrainState& st);

// JSON round trip for run configs, used by checkpoints and the config echo
// written next to command outputs. Parsing validates the result.
std::string run_config_json_string(const RunConfig& cfg);
RunConfig run_config_from_json_string(const std::string& text);

// Reads only the embedded config record of a checkpoint, so a model can be
// rebuilt without knowing the run settings up front.
RunConfig read_checkpoint_config(const std::string& path);

std::vector<Utterance> load_corpus(const CorpusManifest& manifest);

struct TrainResult {
    std::string metrics_path;
    std::string checkpoint_path; // last checkpoint written, empty if none
    int64_t start_step = 0;
    int64_t final_step = 0;
};

// Runs cfg.steps optimizer steps, writing metrics.csv, config.json and
// periodic checkpoints under out_dir. resume_ckpt, when non-empty, restores
// state first and the metrics file continues from that step.
TrainResult train_loop(const RunConfig& cfg, const CorpusManifest& manifest,
                       const std::string& out_dir, const std::string& resume_ckpt = "");

struct EvalReport {
    int64_t frames = 0;
    std::vector<int> per_group_used;
    std::vector<double> per_group_percent; // of codes
    int64_t joint_used = 0;
    int64_t joint_capacity = 0;
    double joint_percent = 0.0; // of codes^groups
    CollapseReport probe;
    bool has_labels = false;
};

// Read-only pass over the corpus: deterministic code selection per frame,
// then utilization and collapse statistics. No parameter is touched.
EvalReport evaluate_codebook(const Model& model, const CorpusManifest& manifest,
                             const std::vector<Utterance>& corpus);

} // namespace w2vc
