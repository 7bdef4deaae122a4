#pragma once

#include "spkmask/rng.hpp"
#include "spkmask/signal.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace spkmask {

struct WordAlignment {
    std::string word;
    double start_s = 0.0;
    double end_s = 0.0;
};

struct Utterance {
    std::string id;
    std::shared_ptr<const AudioClip> audio;
    std::string speaker_id;
    std::vector<std::string> transcript;
    std::vector<WordAlignment> word_alignments;

    double duration_s() const { return audio ? audio->duration_s() : 0.0; }
};

inline void validate(const Utterance& u) {
    if (!u.audio) throw std::invalid_argument("utterance " + u.id + " has no audio");
    double prev = 0.0;
    for (const auto& w : u.word_alignments) {
        if (w.start_s < prev - 1e-9 || w.end_s < w.start_s) throw std::invalid_argument("alignments of " + u.id + " are not monotone");
        if (w.end_s > u.duration_s() + 1e-9) throw std::invalid_argument("alignment of " + u.id + " exceeds clip duration");
        prev = w.start_s;
    }
}

enum class CaseKind { original, case1, case2 };

inline const char* to_string(CaseKind k) {
    switch (k) {
    case CaseKind::original: return "original";
    case CaseKind::case1: return "case1";
    case CaseKind::case2: return "case2";
    }
    return "?";
}

inline CaseKind case_kind_from_string(const std::string& s) {
    if (s == "original") return CaseKind::original;
    if (s == "case1") return CaseKind::case1;
    if (s == "case2") return CaseKind::case2;
    throw std::invalid_argument("unknown case kind: " + s);
}

struct MixtureSource {
    Utterance utterance;
    double offset_s = 0.0;
    double gain = 1.0;

    double start_s() const { return offset_s; }
    double end_s() const { return offset_s + utterance.duration_s(); }
};

struct MixtureExample {
    std::string id;
    AudioClip mixture;
    std::vector<MixtureSource> sources;
    int num_speakers = 0;
    std::map<std::string, MaskVector> speaker_masks;
    CaseKind case_kind = CaseKind::original;
    double peak = 0.0;
    bool alignment_fallback = false;
};

// Earliest speaking time of each speaker; aligned word starts when available.
inline std::map<std::string, double> speaker_first_start(const MixtureExample& ex) {
    std::map<std::string, double> first;
    for (const auto& s : ex.sources) {
        const auto& al = s.utterance.word_alignments;
        const double t = s.offset_s + (al.empty() ? 0.0 : al.front().start_s);
        auto [it, inserted] = first.emplace(s.utterance.speaker_id, t);
        if (!inserted) it->second = std::min(it->second, t);
    }
    return first;
}

// Speaker ids in first-in first-out order. Ties break by id so the order
// depends only on start times, never on the order of the sources list.
inline std::vector<std::string> speaker_order(const MixtureExample& ex) {
    auto first = speaker_first_start(ex);
    std::vector<std::string> ids;
    for (const auto& [id, t] : first) ids.push_back(id);
    std::stable_sort(ids.begin(), ids.end(), [&](const std::string& a, const std::string& b) { return first[a] < first[b]; });
    return ids;
}

inline int count_speakers(const std::vector<MixtureSource>& sources) {
    std::set<std::string> ids;
    for (const auto& s : sources) ids.insert(s.utterance.speaker_id);
    return static_cast<int>(ids.size());
}

struct MaskTargets {
    std::map<std::string, MaskVector> masks;
    bool alignment_fallback = false;
};

// Per-speaker binary targets on the mixture's 20 ms grid: VAD of each
// offset-shifted source, restricted to frames whose centre lies inside one of
// that source's aligned words, OR-combined across a speaker's sources.
inline MaskTargets mask_targets(const MixtureExample& ex, double vad_threshold_db = kDefaultVadThresholdDb) {
    MaskTargets out;
    const int sr = ex.mixture.sample_rate_hz;
    const std::size_t frames = mask_frame_count(ex.mixture.samples.size(), sr);
    for (const auto& s : ex.sources) {
        auto& mask = out.masks[s.utterance.speaker_id];
        if (mask.values.empty()) mask.values.assign(frames, 0.0);
    }
    for (const auto& s : ex.sources) {
        AudioClip shifted;
        shifted.sample_rate_hz = sr;
        shifted.samples.assign(ex.mixture.samples.size(), 0.0);
        const std::size_t off = offset_samples(s.offset_s, sr);
        const auto& src = s.utterance.audio->samples;
        for (std::size_t i = 0; i < src.size() && off + i < shifted.samples.size(); ++i) shifted.samples[off + i] = src[i];
        const MaskVector vad = energy_vad(shifted, 20.0, vad_threshold_db);

        const auto& al = s.utterance.word_alignments;
        if (al.empty()) out.alignment_fallback = true;
        auto& mask = out.masks[s.utterance.speaker_id];
        const double shift = static_cast<double>(off) / sr;
        for (std::size_t f = 0; f < frames; ++f) {
            if (vad.values[f] == 0.0) continue;
            bool inside = al.empty();
            const double centre = (static_cast<double>(f) + 0.5) * kMaskFrameS;
            for (const auto& w : al) {
                if (centre >= shift + w.start_s && centre < shift + w.end_s) {
                    inside = true;
                    break;
                }
            }
            if (inside) mask.values[f] = 1.0;
        }
    }
    return out;
}

inline void finalize_mixture(MixtureExample& ex, double vad_threshold_db) {
    std::vector<MixSource> parts;
    for (const auto& s : ex.sources) parts.push_back({s.utterance.audio.get(), s.offset_s, s.gain});
    ex.mixture = mix_at_offsets(parts);
    ex.peak = peak_abs(ex.mixture);
    ex.num_speakers = count_speakers(ex.sources);
    auto targets = mask_targets(ex, vad_threshold_db);
    ex.speaker_masks = std::move(targets.masks);
    ex.alignment_fallback = targets.alignment_fallback;
}

inline MixtureExample make_original(const Utterance& u, double vad_threshold_db = kDefaultVadThresholdDb) {
    validate(u);
    MixtureExample ex;
    ex.case_kind = CaseKind::original;
    ex.sources.push_back({u, 0.0, 1.0});
    finalize_mixture(ex, vad_threshold_db);
    return ex;
}

// Case 1: b starts overlap_s before a ends; b scaled to the requested SIR
// against a. Offsets are computed in whole samples.
inline MixtureExample make_case1(const Utterance& a, const Utterance& b, double overlap_s, double sir_db,
                                 double vad_threshold_db = kDefaultVadThresholdDb) {
    validate(a);
    validate(b);
    if (a.speaker_id == b.speaker_id) throw std::invalid_argument("case1 needs two different speakers");
    if (a.audio->sample_rate_hz != b.audio->sample_rate_hz) throw std::invalid_argument("mismatched sample rates");
    const int sr = a.audio->sample_rate_hz;
    const std::size_t overlap = offset_samples(overlap_s, sr);
    if (overlap_s < 0.0 || overlap > std::min(a.audio->samples.size(), b.audio->samples.size()))
        throw std::invalid_argument("case1 overlap exceeds the shorter utterance");

    MixtureExample ex;
    ex.case_kind = CaseKind::case1;
    const double gain = sir_gain(mean_power(*a.audio), mean_power(*b.audio), sir_db);
    ex.sources.push_back({a, 0.0, 1.0});
    ex.sources.push_back({b, static_cast<double>(a.audio->samples.size() - overlap) / sr, gain});
    finalize_mixture(ex, vad_threshold_db);
    return ex;
}

// Case 2: speaker 1, speaker 2, speaker 1. b overlaps the tail of a1 by
// overlap1_s; a2 overlaps the tail of b by overlap2_s. b is scaled to the
// requested SIR against the pooled samples of a1 and a2.
inline MixtureExample make_case2(const Utterance& a1, const Utterance& b, const Utterance& a2, double overlap1_s,
                                 double overlap2_s, double sir_db, double vad_threshold_db = kDefaultVadThresholdDb) {
    validate(a1);
    validate(b);
    validate(a2);
    if (a1.speaker_id != a2.speaker_id || a1.speaker_id == b.speaker_id)
        throw std::invalid_argument("case2 needs speaker order S1, S2, S1 with two distinct speakers");
    const int sr = a1.audio->sample_rate_hz;
    if (b.audio->sample_rate_hz != sr || a2.audio->sample_rate_hz != sr) throw std::invalid_argument("mismatched sample rates");
    if (overlap1_s < 0.0 || overlap2_s < 0.0) throw std::invalid_argument("negative overlap");
    const std::size_t o1 = offset_samples(overlap1_s, sr), o2 = offset_samples(overlap2_s, sr);
    const std::size_t la1 = a1.audio->samples.size(), lb = b.audio->samples.size(), la2 = a2.audio->samples.size();
    if (o1 > std::min(la1, lb) || o2 > std::min(lb, la2)) throw std::invalid_argument("case2 overlap exceeds an utterance");
    if (o1 + o2 > lb) throw std::invalid_argument("case2 overlaps exceed the middle utterance");

    AudioClip pooled;
    pooled.sample_rate_hz = sr;
    pooled.samples = a1.audio->samples;
    pooled.samples.insert(pooled.samples.end(), a2.audio->samples.begin(), a2.audio->samples.end());

    MixtureExample ex;
    ex.case_kind = CaseKind::case2;
    const double gain = sir_gain(mean_power(pooled), mean_power(*b.audio), sir_db);
    const std::size_t off_b = la1 - o1;
    const std::size_t off_a2 = off_b + lb - o2;
    ex.sources.push_back({a1, 0.0, 1.0});
    ex.sources.push_back({b, static_cast<double>(off_b) / sr, gain});
    ex.sources.push_back({a2, static_cast<double>(off_a2) / sr, 1.0});
    finalize_mixture(ex, vad_threshold_db);
    return ex;
}

// Measured target/interference power ratio in dB. The interference is the
// speaker that is not first in the sources list.
inline double measured_sir_db(const MixtureExample& ex) {
    if (ex.sources.size() < 2) throw std::invalid_argument("measured_sir_db needs at least two sources");
    const std::string& target = ex.sources.front().utterance.speaker_id;
    double tp = 0.0, ip = 0.0;
    std::size_t tn = 0, in = 0;
    for (const auto& s : ex.sources) {
        double acc = 0.0;
        for (double x : s.utterance.audio->samples) acc += (s.gain * x) * (s.gain * x);
        if (s.utterance.speaker_id == target) {
            tp += acc;
            tn += s.utterance.audio->samples.size();
        } else {
            ip += acc;
            in += s.utterance.audio->samples.size();
        }
    }
    return 10.0 * std::log10((tp / tn) / (ip / in));
}

// ---------------------------------------------------------------------------
// Training / evaluation set assembly.

struct RatioSpec {
    std::map<CaseKind, int> parts;
};

inline void validate(const RatioSpec& r) {
    if (r.parts.empty()) throw std::invalid_argument("ratio has no parts");
    for (const auto& [k, w] : r.parts) {
        if (w <= 0) throw std::invalid_argument("ratio weights must be positive integers");
    }
}

struct SimulationConfig {
    double sir_db = 0.0;
    double overlap_min_s = 0.0;
    double overlap_max_s = 5.0;
    // Evaluation sets use one fixed overlap for every mixture.
    std::optional<double> fixed_overlap_s;
    // Drawn overlaps are floored onto this grid (the mask frame).
    double overlap_grid_s = kMaskFrameS;
    double vad_threshold_db = kDefaultVadThresholdDb;
};

struct TrainingSet {
    std::vector<MixtureExample> examples;
    std::vector<std::string> skipped;
};

namespace detail {

inline std::string numbered(const char* prefix, std::size_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%05zu", prefix, i);
    return buf;
}

inline double draw_overlap(Rng& rng, double lo, double cap, double grid) {
    const double v = rng.uniform(lo, cap);
    if (grid <= 0.0) return v;
    const double q = std::floor(v / grid + 1e-9) * grid;
    return std::max(q, lo);
}

inline std::uint64_t case_code(CaseKind k) { return static_cast<std::uint64_t>(k) + 1; }

} // namespace detail

// Deterministic in (corpus, ratio, config, seed). For a ratio weight w and a
// corpus of N utterances, w*N examples of that kind are produced; example i
// anchors on corpus[i mod N] and draws its partners and overlaps from an RNG
// keyed by (seed, kind, i).
inline TrainingSet build_training_set(const std::vector<Utterance>& corpus, const RatioSpec& ratio,
                                      const SimulationConfig& cfg, std::uint64_t seed) {
    validate(ratio);
    std::set<std::string> speakers;
    for (const auto& u : corpus) speakers.insert(u.speaker_id);
    if (speakers.size() < 2) throw std::invalid_argument("corpus needs at least two speakers");
    const std::size_t n = corpus.size();

    std::map<std::string, std::vector<std::size_t>> by_speaker;
    for (std::size_t i = 0; i < n; ++i) by_speaker[corpus[i].speaker_id].push_back(i);

    auto others = [&](const std::string& spk) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < n; ++i) {
            if (corpus[i].speaker_id != spk) idx.push_back(i);
        }
        return idx;
    };

    TrainingSet out;
    for (const auto& [kind, weight] : ratio.parts) {
        const std::size_t count = static_cast<std::size_t>(weight) * n;
        for (std::size_t i = 0; i < count; ++i) {
            const Utterance& anchor = corpus[i % n];
            Rng rng{seed, detail::case_code(kind), i};
            try {
                if (kind == CaseKind::original) {
                    MixtureExample ex = make_original(anchor, cfg.vad_threshold_db);
                    ex.id = detail::numbered("orig", i);
                    out.examples.push_back(std::move(ex));
                } else if (kind == CaseKind::case1) {
                    const auto pool = others(anchor.speaker_id);
                    const Utterance& partner = corpus[pool[rng.index(pool.size())]];
                    double overlap;
                    if (cfg.fixed_overlap_s) {
                        overlap = *cfg.fixed_overlap_s;
                    } else {
                        const double cap = std::min({cfg.overlap_max_s, anchor.duration_s(), partner.duration_s()});
                        if (cap < cfg.overlap_min_s) throw std::invalid_argument("no feasible overlap");
                        overlap = detail::draw_overlap(rng, cfg.overlap_min_s, cap, cfg.overlap_grid_s);
                    }
                    MixtureExample ex = make_case1(anchor, partner, overlap, cfg.sir_db, cfg.vad_threshold_db);
                    ex.id = detail::numbered("c1", i);
                    out.examples.push_back(std::move(ex));
                } else {
                    std::vector<std::size_t> same;
                    for (std::size_t j : by_speaker[anchor.speaker_id]) {
                        if (corpus[j].id != anchor.id) same.push_back(j);
                    }
                    if (same.empty()) throw std::invalid_argument("speaker " + anchor.speaker_id + " has a single utterance");
                    const Utterance& second = corpus[same[rng.index(same.size())]];
                    const auto pool = others(anchor.speaker_id);
                    const Utterance& middle = corpus[pool[rng.index(pool.size())]];
                    double o1, o2;
                    if (cfg.fixed_overlap_s) {
                        o1 = o2 = *cfg.fixed_overlap_s;
                    } else {
                        const double cap1 = std::min({cfg.overlap_max_s, anchor.duration_s(), middle.duration_s()});
                        if (cap1 < cfg.overlap_min_s) throw std::invalid_argument("no feasible first overlap");
                        o1 = detail::draw_overlap(rng, cfg.overlap_min_s, cap1, cfg.overlap_grid_s);
                        const double cap2 = std::min({cfg.overlap_max_s, second.duration_s(), middle.duration_s() - o1});
                        if (cap2 < cfg.overlap_min_s) throw std::invalid_argument("no feasible second overlap");
                        o2 = detail::draw_overlap(rng, cfg.overlap_min_s, cap2, cfg.overlap_grid_s);
                    }
                    MixtureExample ex = make_case2(anchor, middle, second, o1, o2, cfg.sir_db, cfg.vad_threshold_db);
                    ex.id = detail::numbered("c2", i);
                    out.examples.push_back(std::move(ex));
                }
            } catch (const std::invalid_argument& e) {
                out.skipped.push_back(std::string(to_string(kind)) + " #" + std::to_string(i) + " (anchor " + anchor.id +
                                      "): " + e.what());
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus: each speaker owns a fundamental-frequency band, each word
// is a fixed-duration two-tone burst. Alignments are exact by construction.

struct ToyCorpusConfig {
    int num_speakers = 2;
    int utts_per_speaker = 8;
    std::vector<std::string> vocab = {"ba", "de", "gi", "ko", "mu", "pa", "ti", "zo"};
    int words_min = 3;
    int words_max = 5;
    double word_duration_s = 0.2;
    int sample_rate_hz = kSampleRateHz;
    std::uint64_t seed = 1;
};

inline double speaker_f0_hz(int speaker, std::uint64_t seed) {
    Rng rng{seed, stable_hash("speaker-f0"), static_cast<std::uint64_t>(speaker)};
    return 100.0 + 60.0 * speaker + rng.uniform(0.0, 40.0);
}

inline std::vector<Utterance> gen_toy_corpus(const ToyCorpusConfig& cfg) {
    if (cfg.vocab.empty()) throw std::invalid_argument("toy corpus vocabulary is empty");
    if (cfg.num_speakers <= 0 || cfg.utts_per_speaker <= 0) throw std::invalid_argument("toy corpus needs speakers and utterances");
    if (cfg.words_min <= 0 || cfg.words_max < cfg.words_min) throw std::invalid_argument("bad words-per-utterance range");
    const int sr = cfg.sample_rate_hz;
    const auto word_len = static_cast<std::size_t>(std::llround(cfg.word_duration_s * sr));
    const auto fade = static_cast<std::size_t>(0.005 * sr);
    const double word_s = static_cast<double>(word_len) / sr;

    // Two tone frequencies per vocabulary word, shared by all speakers.
    std::vector<std::pair<double, double>> tones;
    for (std::size_t w = 0; w < cfg.vocab.size(); ++w) {
        Rng rng{cfg.seed, stable_hash("word-tone"), w};
        tones.emplace_back(rng.uniform(600.0, 3600.0), rng.uniform(600.0, 3600.0));
    }

    std::vector<Utterance> corpus;
    for (int s = 0; s < cfg.num_speakers; ++s) {
        Rng spk_rng{cfg.seed, stable_hash("speaker"), static_cast<std::uint64_t>(s)};
        const double f0 = speaker_f0_hz(s, cfg.seed);
        const double amp = spk_rng.uniform(0.15, 0.3);
        for (int u = 0; u < cfg.utts_per_speaker; ++u) {
            Rng rng{cfg.seed, stable_hash("utterance"), static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(u)};
            const int words = cfg.words_min + static_cast<int>(rng.index(static_cast<std::size_t>(cfg.words_max - cfg.words_min + 1)));
            Utterance utt;
            char buf[64];
            std::snprintf(buf, sizeof buf, "spk%d", s);
            utt.speaker_id = buf;
            std::snprintf(buf, sizeof buf, "spk%d-utt%02d", s, u);
            utt.id = buf;
            auto clip = std::make_shared<AudioClip>();
            clip->sample_rate_hz = sr;
            clip->samples.reserve(word_len * static_cast<std::size_t>(words));
            for (int w = 0; w < words; ++w) {
                const std::size_t wi = rng.index(cfg.vocab.size());
                utt.transcript.push_back(cfg.vocab[wi]);
                utt.word_alignments.push_back({cfg.vocab[wi], w * word_s, (w + 1) * word_s});
                for (std::size_t i = 0; i < word_len; ++i) {
                    const double t = static_cast<double>(i) / sr;
                    const double f = i < word_len / 2 ? tones[wi].first : tones[wi].second;
                    double env = 1.0;
                    if (i < fade) env = static_cast<double>(i) / fade;
                    if (word_len - i <= fade) env = static_cast<double>(word_len - i) / fade;
                    const double v = amp * (std::sin(2.0 * std::numbers::pi * f0 * t) + std::sin(2.0 * std::numbers::pi * f * t));
                    clip->samples.push_back(env * v);
                }
            }
            utt.audio = std::move(clip);
            corpus.push_back(std::move(utt));
        }
    }
    return corpus;
}

} // namespace spkmask
