#pragma once

#include "spkmask/error.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

inline constexpr int kSampleRateHz = 16000;
inline constexpr double kMaskFrameS = 0.02;

struct AudioClip {
    std::vector<double> samples;
    int sample_rate_hz = kSampleRateHz;

    double duration_s() const { return static_cast<double>(samples.size()) / sample_rate_hz; }
    bool empty() const { return samples.empty(); }
};

inline void validate(const AudioClip& clip) {
    if (clip.sample_rate_hz <= 0) throw std::invalid_argument("sample rate must be positive");
    for (double s : clip.samples) {
        if (!std::isfinite(s)) throw std::invalid_argument("audio clip contains non-finite samples");
    }
}

enum class MaskKind { binary, probability };

// Per-frame speaker activity. Binary masks are training targets, probability
// masks are model predictions.
struct MaskVector {
    std::vector<double> values;
    double frame_ms = 20.0;
    MaskKind kind = MaskKind::binary;

    std::size_t size() const { return values.size(); }
};

inline void validate(const MaskVector& m) {
    for (double v : m.values) {
        const bool ok = m.kind == MaskKind::binary ? (v == 0.0 || v == 1.0) : (v >= 0.0 && v <= 1.0);
        if (!ok) throw std::invalid_argument("mask value outside its kind's range");
    }
}

// Number of 20 ms frames covering n samples (last partial frame included).
inline std::size_t mask_frame_count(std::size_t num_samples, int sample_rate_hz) {
    const std::size_t frame = static_cast<std::size_t>(std::lround(kMaskFrameS * sample_rate_hz));
    return (num_samples + frame - 1) / frame;
}

// ---------------------------------------------------------------------------
// WAV I/O: PCM 16-bit little-endian mono only.

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | (p[1] << 8)); }

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

} // namespace detail

inline AudioClip load_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open WAV file: " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw DataError("not a RIFF/WAVE file: " + path.string());

    bool have_fmt = false;
    int channels = 0, bits = 0, format = 0;
    std::uint32_t rate = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* hdr = bytes.data() + pos;
        const std::uint32_t size = detail::read_u32(hdr + 4);
        const std::size_t body = pos + 8;
        if (body + size > bytes.size()) throw DataError("truncated WAV chunk in " + path.string());
        if (std::memcmp(hdr, "fmt ", 4) == 0) {
            if (size < 16) throw DataError("short fmt chunk in " + path.string());
            format = detail::read_u16(bytes.data() + body);
            channels = detail::read_u16(bytes.data() + body + 2);
            rate = detail::read_u32(bytes.data() + body + 4);
            bits = detail::read_u16(bytes.data() + body + 14);
            have_fmt = true;
        } else if (std::memcmp(hdr, "data", 4) == 0) {
            if (!have_fmt) throw DataError("data chunk before fmt chunk in " + path.string());
            if (channels != 1) throw DataError("unsupported channel count " + std::to_string(channels) + " in " + path.string());
            if (format != 1 || bits != 16) throw DataError("unsupported encoding (need PCM 16-bit) in " + path.string());
            if (rate == 0) throw DataError("zero sample rate in " + path.string());
            AudioClip clip;
            clip.sample_rate_hz = static_cast<int>(rate);
            clip.samples.resize(size / 2);
            for (std::size_t i = 0; i < clip.samples.size(); ++i) {
                const auto v = static_cast<std::int16_t>(detail::read_u16(bytes.data() + body + 2 * i));
                clip.samples[i] = static_cast<double>(v) / 32768.0;
            }
            return clip;
        }
        pos = body + size + (size & 1u);
    }
    throw DataError("WAV file has no data chunk: " + path.string());
}

// Samples are scaled by `gain` then quantized; values beyond full scale saturate.
inline void save_wav(const std::filesystem::path& path, const AudioClip& clip, double gain = 1.0) {
    std::string out;
    const auto n = static_cast<std::uint32_t>(clip.samples.size());
    out.append("RIFF");
    detail::put_u32(out, 36 + 2 * n);
    out.append("WAVEfmt ");
    detail::put_u32(out, 16);
    detail::put_u16(out, 1);
    detail::put_u16(out, 1);
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz));
    detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate_hz) * 2);
    detail::put_u16(out, 2);
    detail::put_u16(out, 16);
    out.append("data");
    detail::put_u32(out, 2 * n);
    for (double s : clip.samples) {
        const double q = std::clamp(std::round(s * gain * 32768.0), -32768.0, 32767.0);
        detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write WAV file: " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

// ---------------------------------------------------------------------------
// Power, SIR and mixing.

inline double mean_power(const AudioClip& clip) {
    if (clip.empty()) throw std::invalid_argument("mean_power of empty clip");
    double acc = 0.0;
    for (double s : clip.samples) acc += s * s;
    return acc / static_cast<double>(clip.samples.size());
}

// Gain to apply to the interference so that target/interference power equals sir_db.
inline double sir_gain(double target_power, double interference_power, double sir_db) {
    if (!(target_power > 0.0) || !(interference_power > 0.0))
        throw std::invalid_argument("sir_gain needs strictly positive powers");
    return std::sqrt(target_power / (interference_power * std::pow(10.0, sir_db / 10.0)));
}

struct MixSource {
    const AudioClip* clip;
    double offset_s;
    double gain;
};

inline std::size_t offset_samples(double offset_s, int sample_rate_hz) {
    return static_cast<std::size_t>(std::llround(offset_s * sample_rate_hz));
}

// Sample-wise sum of gain-scaled, offset-shifted sources. No clipping.
inline AudioClip mix_at_offsets(std::span<const MixSource> sources) {
    AudioClip out;
    if (sources.empty()) return out;
    out.sample_rate_hz = sources.front().clip->sample_rate_hz;
    std::size_t length = 0;
    for (const auto& s : sources) {
        if (s.clip->sample_rate_hz != out.sample_rate_hz) throw std::invalid_argument("mismatched sample rates in mix");
        if (s.offset_s < 0.0) throw std::invalid_argument("negative mix offset");
        length = std::max(length, offset_samples(s.offset_s, out.sample_rate_hz) + s.clip->samples.size());
    }
    out.samples.assign(length, 0.0);
    for (const auto& s : sources) {
        const std::size_t off = offset_samples(s.offset_s, out.sample_rate_hz);
        for (std::size_t i = 0; i < s.clip->samples.size(); ++i) out.samples[off + i] += s.gain * s.clip->samples[i];
    }
    return out;
}

inline double peak_abs(const AudioClip& clip) {
    double p = 0.0;
    for (double s : clip.samples) p = std::max(p, std::abs(s));
    return p;
}

// ---------------------------------------------------------------------------
// Log-Mel features.

struct FeatureConfig {
    int sample_rate_hz = kSampleRateHz;
    double window_ms = 25.0;
    double stride_ms = 10.0;
    int num_mels = 16;
    int fft_size = 512;
    double log_floor = 1e-10;

    int window_samples() const { return static_cast<int>(std::lround(window_ms * sample_rate_hz / 1000.0)); }
    int stride_samples() const { return static_cast<int>(std::lround(stride_ms * sample_rate_hz / 1000.0)); }
};

// T x M log-Mel energies (row = frame).
struct FeatureMatrix {
    std::vector<double> data;
    std::size_t num_frames = 0;
    int num_mels = 0;
    double frame_stride_ms = 10.0;
    double window_ms = 25.0;

    double at(std::size_t frame, int mel) const { return data[frame * static_cast<std::size_t>(num_mels) + mel]; }
};

inline std::size_t feature_frame_count(std::size_t num_samples, const FeatureConfig& cfg) {
    const auto win = static_cast<std::size_t>(cfg.window_samples());
    if (num_samples < win) return 0;
    return (num_samples - win) / static_cast<std::size_t>(cfg.stride_samples()) + 1;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// HTK-style triangular filters between 0 Hz and Nyquist; M+2 mel-spaced edges.
inline std::vector<double> mel_edge_frequencies(const FeatureConfig& cfg) {
    const double top = hz_to_mel(cfg.sample_rate_hz / 2.0);
    std::vector<double> hz(static_cast<std::size_t>(cfg.num_mels) + 2);
    for (std::size_t i = 0; i < hz.size(); ++i) hz[i] = mel_to_hz(top * static_cast<double>(i) / (hz.size() - 1));
    return hz;
}

inline std::vector<double> mel_center_frequencies(const FeatureConfig& cfg) {
    auto edges = mel_edge_frequencies(cfg);
    return {edges.begin() + 1, edges.end() - 1};
}

// num_mels x (fft_size/2 + 1) weights, row-major.
inline std::vector<double> mel_filterbank(const FeatureConfig& cfg) {
    const auto edges = mel_edge_frequencies(cfg);
    const int bins = cfg.fft_size / 2 + 1;
    std::vector<double> w(static_cast<std::size_t>(cfg.num_mels) * bins, 0.0);
    for (int m = 0; m < cfg.num_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate_hz / cfg.fft_size;
            double v = 0.0;
            if (f > lo && f <= mid) {
                v = (f - lo) / (mid - lo);
            } else if (f > mid && f < hi) {
                v = (hi - f) / (hi - mid);
            }
            w[static_cast<std::size_t>(m) * bins + k] = v;
        }
    }
    return w;
}

namespace detail {

// FFTW plan creation is not thread-safe; execution is.
inline std::mutex& fftw_planner_mutex() {
    static std::mutex m;
    return m;
}

class RealFft {
public:
    explicit RealFft(int n) : n_(n) {
        in_ = static_cast<double*>(fftw_malloc(sizeof(double) * n));
        out_ = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (n / 2 + 1)));
        std::lock_guard lock(fftw_planner_mutex());
        plan_ = fftw_plan_dft_r2c_1d(n, in_, out_, FFTW_ESTIMATE);
    }
    ~RealFft() {
        {
            std::lock_guard lock(fftw_planner_mutex());
            fftw_destroy_plan(plan_);
        }
        fftw_free(in_);
        fftw_free(out_);
    }
    RealFft(const RealFft&) = delete;
    RealFft& operator=(const RealFft&) = delete;

    double* input() { return in_; }
    const fftw_complex* output() const { return out_; }
    void run() { fftw_execute(plan_); }

private:
    int n_;
    double* in_;
    fftw_complex* out_;
    fftw_plan plan_;
};

} // namespace detail

inline FeatureMatrix log_mel(const AudioClip& clip, const FeatureConfig& cfg) {
    if (clip.sample_rate_hz != cfg.sample_rate_hz) throw std::invalid_argument("clip sample rate differs from feature config");
    const int win = cfg.window_samples();
    const int hop = cfg.stride_samples();
    if (win > cfg.fft_size) throw std::invalid_argument("window longer than FFT size");
    if (clip.samples.size() < static_cast<std::size_t>(win)) throw std::invalid_argument("clip shorter than one analysis window");

    FeatureMatrix fm;
    fm.num_mels = cfg.num_mels;
    fm.frame_stride_ms = cfg.stride_ms;
    fm.window_ms = cfg.window_ms;
    fm.num_frames = feature_frame_count(clip.samples.size(), cfg);
    fm.data.assign(fm.num_frames * static_cast<std::size_t>(cfg.num_mels), 0.0);

    std::vector<double> window(static_cast<std::size_t>(win));
    for (int i = 0; i < win; ++i) window[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win); // periodic Hann
    const auto bank = mel_filterbank(cfg);
    const int bins = cfg.fft_size / 2 + 1;
    std::vector<double> mag(static_cast<std::size_t>(bins));

    detail::RealFft fft(cfg.fft_size);
    for (std::size_t t = 0; t < fm.num_frames; ++t) {
        double* in = fft.input();
        const std::size_t start = t * static_cast<std::size_t>(hop);
        for (int i = 0; i < cfg.fft_size; ++i) in[i] = i < win ? clip.samples[start + i] * window[i] : 0.0;
        fft.run();
        const fftw_complex* out = fft.output();
        for (int k = 0; k < bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
        for (int m = 0; m < cfg.num_mels; ++m) {
            double e = 0.0;
            const double* w = bank.data() + static_cast<std::size_t>(m) * bins;
            for (int k = 0; k < bins; ++k) e += w[k] * mag[k];
            fm.data[t * cfg.num_mels + m] = std::log(std::max(e, cfg.log_floor));
        }
    }
    return fm;
}

// ---------------------------------------------------------------------------
// Energy VAD on non-overlapping frames, threshold relative to the loudest frame.

inline constexpr double kDefaultVadThresholdDb = -40.0;

inline MaskVector energy_vad(const AudioClip& clip, double frame_ms = 20.0, double threshold_db_rel = kDefaultVadThresholdDb) {
    if (clip.empty()) throw std::invalid_argument("energy_vad of empty clip");
    if (!(threshold_db_rel < 0.0)) throw std::invalid_argument("VAD threshold must be negative (relative dB)");
    const auto frame = static_cast<std::size_t>(std::lround(frame_ms * clip.sample_rate_hz / 1000.0));
    const std::size_t n = (clip.samples.size() + frame - 1) / frame;
    std::vector<double> energy(n, 0.0);
    for (std::size_t f = 0; f < n; ++f) {
        const std::size_t lo = f * frame;
        const std::size_t hi = std::min(lo + frame, clip.samples.size());
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += clip.samples[i] * clip.samples[i];
        energy[f] = acc / static_cast<double>(hi - lo);
    }
    MaskVector mask;
    mask.frame_ms = frame_ms;
    mask.kind = MaskKind::binary;
    mask.values.assign(n, 0.0);
    const double peak = *std::max_element(energy.begin(), energy.end());
    if (peak <= 0.0) return mask;
    const double floor_db = 10.0 * std::log10(peak) + threshold_db_rel;
    for (std::size_t f = 0; f < n; ++f) {
        if (energy[f] > 0.0 && 10.0 * std::log10(energy[f]) >= floor_db) mask.values[f] = 1.0;
    }
    return mask;
}

} // namespace spkmask
