#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "w2vc/errors.hpp"

namespace w2vc {

// Log-magnitude spectrogram frames. Values are stored as 32-bit floats so the
// on-disk format round-trips bit-exactly; training promotes to doubles.
struct FeatureMatrix {
    int T = 0;
    int F = 0;
    std::vector<float> values; // row-major, T rows of F

    float at(int t, int f) const { return values[static_cast<size_t>(t) * F + f]; }
    std::vector<double> as_doubles() const;
};

struct StftConfig {
    int sample_rate = 16000;
    int window = 400; // 25 ms at 16 kHz
    int hop = 160;    // 10 ms
    std::string window_fn = "hann";
    double floor = 1e-10;
};

// Frame count and double-precision log-magnitudes for a waveform; the
// FeatureMatrix variant narrows the same values to float storage.
struct StftFrames {
    int T = 0;
    int F = 0;
    std::vector<double> values;
};

StftFrames log_stft_values(const std::vector<double>& wave, const StftConfig& cfg);
FeatureMatrix log_stft(const std::vector<double>& wave, const StftConfig& cfg);

void write_features(const FeatureMatrix& fm, const std::string& path);
FeatureMatrix read_features(const std::string& path);

// Normalization statistics over a corpus, per feature dimension. Variance is
// clamped to 1 for degenerate dimensions at computation time.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> var;
    bool valid = false;
};

struct ManifestEntry {
    std::string id;
    std::string path; // resolved to an absolute/openable path after read
    int frames = 0;
};

struct CorpusManifest {
    int dim = 0;
    uint64_t seed = 0;
    int n_classes = 0;
    double noise_sigma = 0.0;
    std::vector<std::vector<double>> templates; // n_classes x dim, empty for real data
    NormStats stats;
    std::vector<ManifestEntry> entries;
};

struct SynthConfig {
    uint64_t seed = 1;
    int n_utts = 32;
    int frames_lo = 60;
    int frames_hi = 120;
    int dim = 64;
    int n_classes = 8;
    double noise_sigma = 0.1;
    int dwell_lo = 3;
    int dwell_hi = 15;
};

// Generates feature files plus manifest.jsonl under out_dir. Utterances are
// random walks over per-class Gaussian templates with uniform dwell times;
// everything is a pure function of the config.
CorpusManifest synth_corpus(const SynthConfig& cfg, const std::string& out_dir);

void write_manifest(const CorpusManifest& m, const std::string& path);
// Validates that every feature file exists and its header matches the
// recorded frame count.
CorpusManifest read_manifest(const std::string& path);

// One streaming pass over all feature files.
NormStats compute_norm_stats(const CorpusManifest& m);

struct Utterance {
    std::string id;
    int T = 0;
    int F = 0;
    std::vector<double> x; // normalized when stats.valid
};

Utterance load_utterance(const ManifestEntry& e, const NormStats& stats);
std::vector<double> denormalize(const std::vector<double>& x, int F, const NormStats& stats);

// Ground-truth recovery for the synthetic corpus: nearest template per frame
// in raw (de-normalized) feature space.
std::vector<int> nearest_template_labels(const std::vector<double>& raw, int T, int F,
                                         const std::vector<std::vector<double>>& templates);

// Minimal PCM16 mono WAV reader; samples scaled to [-1, 1).
std::vector<double> read_wav_pcm16(const std::string& path, int& sample_rate);

} // namespace w2vc
