#include "w2vc/frontend.hpp"

#include "w2vc/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace w2vc {

std::vector<double> FeatureMatrix::as_doubles() const {
    return std::vector<double>(values.begin(), values.end());
}

StftFrames log_stft_values(const std::vector<double>& wave, const StftConfig& cfg) {
    if (cfg.hop <= 0 || cfg.hop > cfg.window) throw config_error("stft: need 0 < hop <= window");
    if (cfg.floor <= 0) throw config_error("stft: floor must be positive");
    if (cfg.window_fn != "hann") throw config_error("stft: unknown window '" + cfg.window_fn + "'");
    const int W = cfg.window;
    if (static_cast<int>(wave.size()) < W)
        throw data_error("stft: waveform shorter than one window (" +
                         std::to_string(wave.size()) + " < " + std::to_string(W) + ")");

    StftFrames out;
    out.T = 1 + static_cast<int>((wave.size() - W) / cfg.hop);
    out.F = W / 2 + 1;
    out.values.resize(static_cast<size_t>(out.T) * out.F);

    std::vector<double> win(W);
    for (int n = 0; n < W; ++n)
        win[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / W); // periodic hann

    std::vector<double> frame(W);
    for (int t = 0; t < out.T; ++t) {
        const double* x = wave.data() + static_cast<size_t>(t) * cfg.hop;
        for (int n = 0; n < W; ++n) frame[n] = x[n] * win[n];
        for (int k = 0; k < out.F; ++k) {
            double re = 0, im = 0;
            for (int n = 0; n < W; ++n) {
                const double ph = 2.0 * std::numbers::pi * k * n / W;
                re += frame[n] * std::cos(ph);
                im -= frame[n] * std::sin(ph);
            }
            const double mag = std::sqrt(re * re + im * im);
            out.values[static_cast<size_t>(t) * out.F + k] = std::log(std::max(mag, cfg.floor));
        }
    }
    return out;
}

FeatureMatrix log_stft(const std::vector<double>& wave, const StftConfig& cfg) {
    auto d = log_stft_values(wave, cfg);
    FeatureMatrix fm;
    fm.T = d.T;
    fm.F = d.F;
    fm.values.assign(d.values.begin(), d.values.end());
    return fm;
}

namespace {

constexpr char kMagic[4] = {'W', '2', 'V', 'F'};
constexpr uint32_t kFeatureVersion = 1;

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw data_error("feature file truncated reading " + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

} // namespace

void write_features(const FeatureMatrix& fm, const std::string& path) {
    if (fm.T < 1 || fm.F < 1 ||
        fm.values.size() != static_cast<size_t>(fm.T) * static_cast<size_t>(fm.F))
        throw usage_error("write_features: inconsistent matrix");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw data_error("cannot open for write: " + path);
    os.write(kMagic, 4);
    put_u32(os, kFeatureVersion);
    put_u32(os, static_cast<uint32_t>(fm.T));
    put_u32(os, static_cast<uint32_t>(fm.F));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(fm.values.data()),
             static_cast<std::streamsize>(fm.values.size() * 4));
    if (!os) throw data_error("write failed: " + path);
}

FeatureMatrix read_features(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    char magic[4];
    if (!is.read(magic, 4)) throw data_error("feature file truncated reading magic: " + path);
    if (std::memcmp(magic, kMagic, 4) != 0) throw data_error("bad magic in " + path);
    const uint32_t version = get_u32(is, "version");
    if (version != kFeatureVersion)
        throw data_error("unsupported feature file version " + std::to_string(version) + " in " +
                         path);
    const uint32_t T = get_u32(is, "frame count");
    const uint32_t F = get_u32(is, "feature dim");
    if (T < 1 || F < 1) throw data_error("empty feature matrix in " + path);
    const uint64_t want = static_cast<uint64_t>(T) * F;
    const auto actual_bytes = fs::file_size(path);
    if (actual_bytes != 16 + want * 4)
        throw data_error("size mismatch in " + path + ": header says " + std::to_string(want) +
                         " values, file holds " + std::to_string((actual_bytes - 16) / 4));
    FeatureMatrix fm;
    fm.T = static_cast<int>(T);
    fm.F = static_cast<int>(F);
    fm.values.resize(want);
    if (!is.read(reinterpret_cast<char*>(fm.values.data()),
                 static_cast<std::streamsize>(want * 4)))
        throw data_error("feature file truncated reading payload: " + path);
    return fm;
}

CorpusManifest synth_corpus(const SynthConfig& cfg, const std::string& out_dir) {
    if (cfg.n_classes < 2) throw config_error("synth_corpus: need at least 2 classes");
    if (cfg.n_utts < 1) throw config_error("synth_corpus: need at least 1 utterance");
    if (cfg.frames_lo < 1 || cfg.frames_hi < cfg.frames_lo)
        throw config_error("synth_corpus: bad frame range");
    if (cfg.dwell_lo < 1 || cfg.dwell_hi < cfg.dwell_lo)
        throw config_error("synth_corpus: bad dwell range");
    if (cfg.dim < 1) throw config_error("synth_corpus: bad dim");
    if (cfg.noise_sigma < 0) throw config_error("synth_corpus: negative noise");

    fs::create_directories(out_dir);

    CorpusManifest m;
    m.dim = cfg.dim;
    m.seed = cfg.seed;
    m.n_classes = cfg.n_classes;
    m.noise_sigma = cfg.noise_sigma;

    Rng template_rng(mix_seed(cfg.seed, "templates"));
    m.templates.assign(cfg.n_classes, std::vector<double>(cfg.dim));
    for (auto& tpl : m.templates)
        for (auto& v : tpl) v = template_rng.normal();

    for (int u = 0; u < cfg.n_utts; ++u) {
        Rng rng(mix_seed(cfg.seed, "utt" + std::to_string(u)));
        const int T = static_cast<int>(
            rng.uniform_int(static_cast<int64_t>(cfg.frames_lo), cfg.frames_hi));
        FeatureMatrix fm;
        fm.T = T;
        fm.F = cfg.dim;
        fm.values.resize(static_cast<size_t>(T) * cfg.dim);

        int cls = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(cfg.n_classes)));
        int t = 0;
        while (t < T) {
            const int dwell = static_cast<int>(
                rng.uniform_int(static_cast<int64_t>(cfg.dwell_lo), cfg.dwell_hi));
            for (int d = 0; d < dwell && t < T; ++d, ++t)
                for (int f = 0; f < cfg.dim; ++f)
                    fm.values[static_cast<size_t>(t) * cfg.dim + f] = static_cast<float>(
                        m.templates[cls][f] + cfg.noise_sigma * rng.normal());
            // hop to a different class, uniform over the remaining ones
            const int step = 1 + static_cast<int>(
                                     rng.uniform_int(static_cast<uint64_t>(cfg.n_classes - 1)));
            cls = (cls + step) % cfg.n_classes;
        }

        char id[16];
        std::snprintf(id, sizeof(id), "utt_%04d", u);
        const std::string path = (fs::path(out_dir) / (std::string(id) + ".w2vf")).string();
        write_features(fm, path);
        m.entries.push_back({id, path, T});
    }

    write_manifest(m, (fs::path(out_dir) / "manifest.jsonl").string());
    return m;
}

void write_manifest(const CorpusManifest& m, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw data_error("cannot open for write: " + path);
    json header = {{"dim", m.dim},
                   {"seed", m.seed},
                   {"n_classes", m.n_classes},
                   {"noise_sigma", m.noise_sigma}};
    if (!m.templates.empty()) header["templates"] = m.templates;
    if (m.stats.valid) header["norm"] = {{"mean", m.stats.mean}, {"var", m.stats.var}};
    os << header.dump() << "\n";
    const fs::path base = fs::path(path).parent_path();
    for (const auto& e : m.entries) {
        // store paths relative to the manifest when possible
        std::string p = e.path;
        std::error_code ec;
        auto rel = fs::relative(e.path, base, ec);
        if (!ec && !rel.empty()) p = rel.string();
        os << json{{"id", e.id}, {"path", p}, {"frames", e.frames}}.dump() << "\n";
    }
    if (!os) throw data_error("write failed: " + path);
}

CorpusManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw data_error("cannot open: " + path);
    std::string line;
    if (!std::getline(is, line)) throw data_error("empty manifest: " + path);

    CorpusManifest m;
    try {
        json header = json::parse(line);
        m.dim = header.at("dim").get<int>();
        m.seed = header.value("seed", uint64_t{0});
        m.n_classes = header.value("n_classes", 0);
        m.noise_sigma = header.value("noise_sigma", 0.0);
        if (header.contains("templates"))
            m.templates = header["templates"].get<std::vector<std::vector<double>>>();
        if (header.contains("norm")) {
            m.stats.mean = header["norm"].at("mean").get<std::vector<double>>();
            m.stats.var = header["norm"].at("var").get<std::vector<double>>();
            m.stats.valid = true;
        }
    } catch (const json::exception& e) {
        throw data_error("bad manifest header in " + path + ": " + e.what());
    }
    if (m.dim < 1) throw data_error("manifest dim must be positive: " + path);

    const fs::path base = fs::path(path).parent_path();
    int lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        ManifestEntry e;
        try {
            json j = json::parse(line);
            e.id = j.at("id").get<std::string>();
            e.path = j.at("path").get<std::string>();
            e.frames = j.at("frames").get<int>();
        } catch (const json::exception& ex) {
            throw data_error("bad manifest line " + std::to_string(lineno) + " in " + path +
                             ": " + ex.what());
        }
        if (fs::path(e.path).is_relative()) e.path = (base / e.path).string();
        if (!fs::exists(e.path)) throw data_error("missing feature file: " + e.path);
        auto fm = read_features(e.path);
        if (fm.T != e.frames)
            throw data_error("frame count mismatch for " + e.id + ": manifest says " +
                             std::to_string(e.frames) + ", file has " + std::to_string(fm.T));
        if (fm.F != m.dim)
            throw data_error("feature dim mismatch for " + e.id + ": manifest says " +
                             std::to_string(m.dim) + ", file has " + std::to_string(fm.F));
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw data_error("manifest has no utterances: " + path);
    return m;
}

NormStats compute_norm_stats(const CorpusManifest& m) {
    NormStats s;
    const int F = m.dim;
    s.mean.assign(F, 0.0);
    s.var.assign(F, 0.0);
    std::vector<double> sum(F, 0.0), sumsq(F, 0.0);
    int64_t n = 0;
    for (const auto& e : m.entries) {
        auto fm = read_features(e.path);
        for (int t = 0; t < fm.T; ++t)
            for (int f = 0; f < F; ++f) {
                const double v = fm.at(t, f);
                sum[f] += v;
                sumsq[f] += v * v;
            }
        n += fm.T;
    }
    for (int f = 0; f < F; ++f) {
        s.mean[f] = sum[f] / n;
        double var = sumsq[f] / n - s.mean[f] * s.mean[f];
        if (var < 1e-12) {
            std::cerr << "warning: feature dim " << f << " has near-zero variance, clamping to 1\n";
            var = 1.0;
        }
        s.var[f] = var;
    }
    s.valid = true;
    return s;
}

Utterance load_utterance(const ManifestEntry& e, const NormStats& stats) {
    auto fm = read_features(e.path);
    Utterance u;
    u.id = e.id;
    u.T = fm.T;
    u.F = fm.F;
    u.x = fm.as_doubles();
    if (stats.valid) {
        if (static_cast<int>(stats.mean.size()) != fm.F)
            throw usage_error("normalization stats dim does not match features");
        for (int t = 0; t < u.T; ++t)
            for (int f = 0; f < u.F; ++f) {
                auto& v = u.x[static_cast<size_t>(t) * u.F + f];
                v = (v - stats.mean[f]) / std::sqrt(stats.var[f]);
            }
    }
    return u;
}

std::vector<double> denormalize(const std::vector<double>& x, int F, const NormStats& stats) {
    if (!stats.valid) return x;
    std::vector<double> out(x.size());
    const int T = static_cast<int>(x.size()) / F;
    for (int t = 0; t < T; ++t)
        for (int f = 0; f < F; ++f)
            out[static_cast<size_t>(t) * F + f] =
                x[static_cast<size_t>(t) * F + f] * std::sqrt(stats.var[f]) + stats.mean[f];
    return out;
}

std::vector<int> nearest_template_labels(const std::vector<double>& raw, int T, int F,
                                         const std::vector<std::vector<double>>& templates) {
    if (templates.empty()) throw usage_error("no templates available for labeling");
    std::vector<int> labels(T);
    for (int t = 0; t < T; ++t) {
        double best = 0;
        int arg = -1;
        for (size_t c = 0; c < templates.size(); ++c) {
            double d = 0;
            for (int f = 0; f < F; ++f) {
                const double diff = raw[static_cast<size_t>(t) * F + f] - templates[c][f];
                d += diff * diff;
            }
            if (arg < 0 || d < best) {
                best = d;
                arg = static_cast<int>(c);
            }
        }
        labels[t] = arg;
    }
    return labels;
}

std::vector<double> read_wav_pcm16(const std::string& path, int& sample_rate) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw data_error("cannot open: " + path);
    auto u16 = [&](const char* what) {
        unsigned char b[2];
        if (!is.read(reinterpret_cast<char*>(b), 2))
            throw data_error(std::string("wav truncated at ") + what + ": " + path);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    };
    auto u32 = [&](const char* what) {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4))
            throw data_error(std::string("wav truncated at ") + what + ": " + path);
        return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
               (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    };
    char tag[4];
    if (!is.read(tag, 4) || std::memcmp(tag, "RIFF", 4) != 0)
        throw data_error("not a RIFF file: " + path);
    u32("riff size");
    if (!is.read(tag, 4) || std::memcmp(tag, "WAVE", 4) != 0)
        throw data_error("not a WAVE file: " + path);

    int channels = 0, bits = 0;
    sample_rate = 0;
    std::vector<double> samples;
    while (is.read(tag, 4)) {
        const uint32_t chunk = u32("chunk size");
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            const uint16_t fmt = u16("format");
            channels = u16("channels");
            sample_rate = static_cast<int>(u32("sample rate"));
            u32("byte rate");
            u16("block align");
            bits = u16("bits");
            if (fmt != 1 || bits != 16)
                throw data_error("only PCM16 wav supported: " + path);
            if (channels != 1) throw data_error("only mono wav supported: " + path);
            if (chunk > 16) is.seekg(chunk - 16, std::ios::cur);
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (channels == 0) throw data_error("wav data before fmt chunk: " + path);
            const uint32_t n = chunk / 2;
            samples.resize(n);
            for (uint32_t i = 0; i < n; ++i) {
                unsigned char b[2];
                if (!is.read(reinterpret_cast<char*>(b), 2))
                    throw data_error("wav truncated in data chunk: " + path);
                const int16_t v = static_cast<int16_t>(b[0] | (b[1] << 8));
                samples[i] = v / 32768.0;
            }
            return samples;
        } else {
            is.seekg(chunk + (chunk & 1), std::ios::cur);
        }
    }
    throw data_error("wav has no data chunk: " + path);
}

} // namespace w2vc
